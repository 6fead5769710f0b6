use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use super::{RankId, Tag};
use crate::error::{Error, Result};

pub(crate) enum Inbound {
    Message { tag: Tag, payload: Vec<u8> },
    /// The connection delivering this source's messages failed.
    Fault(String),
}

/// Receive side shared by both backends: one channel per source rank plus
/// a stash for messages that arrived ahead of the tag being waited on.
pub(crate) struct Mailbox {
    inbound: Vec<Option<Receiver<Inbound>>>,
    stash: HashMap<(usize, Tag), VecDeque<Vec<u8>>>,
    timeout: Duration,
}

impl Mailbox {
    pub(crate) fn new(inbound: Vec<Option<Receiver<Inbound>>>, timeout: Duration) -> Self {
        Self {
            inbound,
            stash: HashMap::new(),
            timeout,
        }
    }

    pub(crate) fn recv(&mut self, source: RankId, tag: Tag) -> Result<Vec<u8>> {
        if let Some(queue) = self.stash.get_mut(&(source.0, tag)) {
            if let Some(payload) = queue.pop_front() {
                return Ok(payload);
            }
        }
        let rx = self.inbound[source.0]
            .as_ref()
            .ok_or_else(|| Error::Transport(format!("no channel from rank {source}")))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(remaining) {
                Ok(Inbound::Message { tag: t, payload }) if t == tag => return Ok(payload),
                Ok(Inbound::Message { tag: t, payload }) => {
                    self.stash.entry((source.0, t)).or_default().push_back(payload);
                }
                Ok(Inbound::Fault(why)) => {
                    return Err(Error::Transport(format!("link from rank {source}: {why}")));
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Timeout {
                        rank: source.0,
                        what: format!("message with tag {tag:#x} after {:?}", self.timeout),
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Transport(format!(
                        "connection from rank {source} closed while waiting for tag {tag:#x}"
                    )));
                }
            }
        }
    }
}
