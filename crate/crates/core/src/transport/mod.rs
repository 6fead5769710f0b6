//! Rank-addressed point-to-point messaging.
//!
//! Two backends implement [`Endpoint`]: [`LocalEndpoint`] connects worker
//! threads in one process through channels, [`TcpEndpoint`] connects one
//! process per rank over a full TCP mesh. Both deliver messages FIFO per
//! `(source, destination, tag)` and count the traffic they carry.

mod codec;
mod local;
mod mailbox;
mod tcp;

use std::fmt;
use std::time::Duration;

use crate::error::{invalid, Error, Result};
use crate::scalar::ceil_log2;

pub use codec::{decode_sparse, encode_sparse, encode_sparse_into, encoded_len, sparse_magic};
pub use local::{create_local_cluster, create_local_cluster_with_timeout, LocalEndpoint};
pub use tcp::{connect_tcp_cluster, TcpEndpoint, FRAME_HEADER_BYTES, FRAME_MAGIC};

/// Message tag. Values at or above [`RESERVED_TAG_BASE`] belong to the
/// library's own collectives.
pub type Tag = u32;

pub const RESERVED_TAG_BASE: Tag = 0xFFFF_0000;
pub(crate) const TAG_BARRIER: Tag = RESERVED_TAG_BASE;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// A worker's position in the cluster, `0..P`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RankId(pub usize);

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for RankId {
    fn from(r: usize) -> Self {
        RankId(r)
    }
}

/// Traffic counters. Bytes are payload bytes, framing excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

impl TransportStats {
    /// Counter increase from `earlier` to `self`.
    pub fn since(&self, earlier: &TransportStats) -> TransportStats {
        TransportStats {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            messages_sent: self.messages_sent - earlier.messages_sent,
            messages_received: self.messages_received - earlier.messages_received,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    InProcess,
    Tcp,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-process" | "local" => Ok(Backend::InProcess),
            "tcp" => Ok(Backend::Tcp),
            other => Err(invalid(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub world_size: usize,
    pub backend: Backend,
    /// `host:port` per rank; required for the tcp backend.
    pub peers: Vec<String>,
    pub timeout: Duration,
}

impl ClusterConfig {
    pub fn in_process(world_size: usize) -> Self {
        Self {
            world_size,
            backend: Backend::InProcess,
            peers: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn tcp(peers: Vec<String>) -> Self {
        Self {
            world_size: peers.len(),
            backend: Backend::Tcp,
            peers,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// Parses a hosts file: one `rank host port` line per rank.
    /// Blank lines and `#` comments are skipped.
    pub fn from_hosts(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [rank, host, port] = fields[..] else {
                return Err(invalid(format!(
                    "hosts line {}: expected `rank host port`, got {line:?}",
                    lineno + 1
                )));
            };
            let rank: usize = rank
                .parse()
                .map_err(|_| invalid(format!("hosts line {}: bad rank {rank:?}", lineno + 1)))?;
            let port: u16 = port
                .parse()
                .map_err(|_| invalid(format!("hosts line {}: bad port {port:?}", lineno + 1)))?;
            entries.push((rank, format!("{host}:{port}")));
        }
        entries.sort_by_key(|e| e.0);
        for (expected, (rank, _)) in entries.iter().enumerate() {
            if *rank != expected {
                return Err(invalid(format!(
                    "hosts file ranks must be exactly 0..{}; found rank {rank} at position {expected}",
                    entries.len()
                )));
            }
        }
        if entries.is_empty() {
            return Err(invalid("hosts file lists no ranks"));
        }
        Ok(Self::tcp(entries.into_iter().map(|e| e.1).collect()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.world_size < 1 {
            return Err(invalid("cluster needs at least one worker"));
        }
        if self.backend == Backend::Tcp && self.peers.len() != self.world_size {
            return Err(invalid(format!(
                "tcp backend needs {} peer addresses, got {}",
                self.world_size,
                self.peers.len()
            )));
        }
        Ok(())
    }
}

/// One rank's handle on the cluster. Owned by a single worker; calls are
/// sequential.
pub trait Endpoint: Send {
    fn rank(&self) -> RankId;

    fn world_size(&self) -> usize;

    /// Queues `payload` for `dest`. Never blocks on the receiver.
    fn send(&mut self, dest: RankId, tag: Tag, payload: &[u8]) -> Result<()>;

    /// Blocks until the next message from `source` with `tag` arrives.
    fn recv(&mut self, source: RankId, tag: Tag) -> Result<Vec<u8>>;

    fn stats(&self) -> TransportStats;

    /// Dissemination barrier: `⌈log₂P⌉` rounds, one send and one receive
    /// per round.
    fn barrier(&mut self) -> Result<()> {
        let p = self.world_size();
        let r = self.rank().0;
        for round in 0..ceil_log2(p) {
            let dist = 1usize << round;
            self.send(RankId((r + dist) % p), TAG_BARRIER, &[])?;
            self.recv(RankId((r + p - dist) % p), TAG_BARRIER)?;
        }
        Ok(())
    }
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn rank(&self) -> RankId {
        (**self).rank()
    }
    fn world_size(&self) -> usize {
        (**self).world_size()
    }
    fn send(&mut self, dest: RankId, tag: Tag, payload: &[u8]) -> Result<()> {
        (**self).send(dest, tag, payload)
    }
    fn recv(&mut self, source: RankId, tag: Tag) -> Result<Vec<u8>> {
        (**self).recv(source, tag)
    }
    fn stats(&self) -> TransportStats {
        (**self).stats()
    }
    fn barrier(&mut self) -> Result<()> {
        (**self).barrier()
    }
}

pub(crate) fn check_peer(me: RankId, world: usize, peer: RankId, verb: &str) -> Result<()> {
    if peer == me {
        return Err(invalid(format!("rank {me} cannot {verb} itself")));
    }
    if peer.0 >= world {
        return Err(invalid(format!(
            "rank {peer} out of range for cluster of {world}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hosts_file_parsing() {
        let cfg = ClusterConfig::from_hosts("# cluster\n1 10.0.0.2 9001\n0 10.0.0.1 9000\n\n").unwrap();
        assert_eq!(cfg.world_size, 2);
        assert_eq!(cfg.peers, vec!["10.0.0.1:9000", "10.0.0.2:9001"]);
        assert!(cfg.validate().is_ok());

        assert!(ClusterConfig::from_hosts("0 a 1\n2 b 2\n").is_err());
        assert!(ClusterConfig::from_hosts("0 a\n").is_err());
        assert!(ClusterConfig::from_hosts("0 a 99999\n").is_err());
        assert!(ClusterConfig::from_hosts("").is_err());
    }

    #[test]
    fn stats_delta() {
        let a = TransportStats {
            bytes_sent: 10,
            bytes_received: 4,
            messages_sent: 2,
            messages_received: 1,
        };
        let b = TransportStats {
            bytes_sent: 25,
            bytes_received: 4,
            messages_sent: 3,
            messages_received: 1,
        };
        assert_eq!(
            b.since(&a),
            TransportStats {
                bytes_sent: 15,
                bytes_received: 0,
                messages_sent: 1,
                messages_received: 0,
            }
        );
    }
}
