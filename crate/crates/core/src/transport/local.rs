//! In-process backend: one unbounded channel per ordered rank pair.

use std::sync::mpsc::{channel, Sender};
use std::time::Duration;

use super::mailbox::{Inbound, Mailbox};
use super::{check_peer, Endpoint, RankId, Tag, TransportStats, DEFAULT_TIMEOUT};
use crate::error::{invalid, Error, Result};

pub struct LocalEndpoint {
    rank: RankId,
    world: usize,
    outbound: Vec<Option<Sender<Inbound>>>,
    mailbox: Mailbox,
    stats: TransportStats,
}

/// Builds `world` mutually connected endpoints, index == rank.
pub fn create_local_cluster(world: usize) -> Result<Vec<LocalEndpoint>> {
    create_local_cluster_with_timeout(world, DEFAULT_TIMEOUT)
}

pub fn create_local_cluster_with_timeout(
    world: usize,
    timeout: Duration,
) -> Result<Vec<LocalEndpoint>> {
    if world < 1 {
        return Err(invalid("cluster needs at least one worker"));
    }
    // senders[src][dst], receivers[dst][src]
    let mut senders: Vec<Vec<Option<Sender<Inbound>>>> = (0..world).map(|_| Vec::new()).collect();
    let mut receivers: Vec<Vec<Option<_>>> =
        (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
    for (src, row) in senders.iter_mut().enumerate() {
        for dst in 0..world {
            if src == dst {
                row.push(None);
                continue;
            }
            let (tx, rx) = channel();
            row.push(Some(tx));
            receivers[dst][src] = Some(rx);
        }
    }
    Ok(senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (outbound, inbound))| LocalEndpoint {
            rank: RankId(rank),
            world,
            outbound,
            mailbox: Mailbox::new(inbound, timeout),
            stats: TransportStats::default(),
        })
        .collect())
}

impl Endpoint for LocalEndpoint {
    fn rank(&self) -> RankId {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send(&mut self, dest: RankId, tag: Tag, payload: &[u8]) -> Result<()> {
        check_peer(self.rank, self.world, dest, "send to")?;
        if payload.len() > u32::MAX as usize {
            return Err(invalid("payload exceeds 4 GiB"));
        }
        let tx = self.outbound[dest.0].as_ref().expect("peer channel");
        tx.send(Inbound::Message {
            tag,
            payload: payload.to_vec(),
        })
        .map_err(|_| Error::Transport(format!("rank {dest} has shut down")))?;
        self.stats.bytes_sent += payload.len() as u64;
        self.stats.messages_sent += 1;
        Ok(())
    }

    fn recv(&mut self, source: RankId, tag: Tag) -> Result<Vec<u8>> {
        check_peer(self.rank, self.world, source, "receive from")?;
        let payload = self.mailbox.recv(source, tag)?;
        self.stats.bytes_received += payload.len() as u64;
        self.stats.messages_received += 1;
        Ok(payload)
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}
