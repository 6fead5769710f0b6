//! TCP backend: a full mesh of sockets, one per rank pair.
//!
//! Handshake: rank `r` connects to every lower rank and accepts every higher
//! rank. The connecting side writes its rank as a little-endian `u32`; the
//! accepting side answers with its own.
//!
//! Frames:
//!
//! ```text
//! magic  u32  0x6754524E
//! source u32
//! tag    u32
//! length u32
//! payload
//! ```
//!
//! All header fields little-endian.

use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Sender};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::mailbox::{Inbound, Mailbox};
use super::{check_peer, Backend, ClusterConfig, Endpoint, RankId, Tag, TransportStats};
use crate::error::{invalid, protocol, Error, Result};

pub const FRAME_MAGIC: u32 = 0x6754_524E;
pub const FRAME_HEADER_BYTES: usize = 16;

const POLL_INTERVAL: Duration = Duration::from_millis(5);

pub struct TcpEndpoint {
    rank: RankId,
    world: usize,
    streams: Vec<Option<TcpStream>>,
    mailbox: Mailbox,
    stats: TransportStats,
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| invalid(format!("cannot resolve {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| invalid(format!("{addr:?} resolves to no address")))
}

/// Joins the mesh described by `cfg` as `my_rank`, returning once every
/// peer has completed the handshake.
pub fn connect_tcp_cluster(cfg: &ClusterConfig, my_rank: RankId) -> Result<TcpEndpoint> {
    cfg.validate()?;
    if cfg.backend != Backend::Tcp {
        return Err(invalid("connect_tcp_cluster needs a tcp cluster config"));
    }
    let world = cfg.world_size;
    if my_rank.0 >= world {
        return Err(invalid(format!("rank {my_rank} out of range for {world} workers")));
    }
    let deadline = Instant::now() + cfg.timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

    let listener = if my_rank.0 + 1 < world {
        Some(TcpListener::bind(resolve(&cfg.peers[my_rank.0])?)?)
    } else {
        None
    };

    for peer in 0..my_rank.0 {
        let stream = dial(&cfg.peers[peer], peer, deadline)?;
        stream.set_read_timeout(Some(remaining(deadline, peer)?))?;
        let mut stream = stream;
        stream.write_all(&(my_rank.0 as u32).to_le_bytes())?;
        let answered = read_rank(&mut stream, peer)?;
        if answered != peer {
            return Err(protocol(format!(
                "dialled rank {peer} at {} but it announced rank {answered}",
                cfg.peers[peer]
            )));
        }
        streams[peer] = Some(stream);
    }

    if let Some(listener) = listener {
        listener.set_nonblocking(true)?;
        while streams[my_rank.0 + 1..].iter().any(Option::is_none) {
            match listener.accept() {
                Ok((mut stream, from)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(POLL_INTERVAL)))?;
                    let announced = read_rank(&mut stream, usize::MAX)?;
                    if announced <= my_rank.0 || announced >= world {
                        return Err(protocol(format!(
                            "{from} announced rank {announced}, expected one of {}..{world}",
                            my_rank.0 + 1
                        )));
                    }
                    if streams[announced].is_some() {
                        return Err(protocol(format!(
                            "duplicate rank announcement: rank {announced} (from {from})"
                        )));
                    }
                    stream.write_all(&(my_rank.0 as u32).to_le_bytes())?;
                    debug!("rank {my_rank}: accepted rank {announced} from {from}");
                    streams[announced] = Some(stream);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing: Vec<usize> = (my_rank.0 + 1..world)
                            .filter(|&r| streams[r].is_none())
                            .collect();
                        return Err(Error::Timeout {
                            rank: missing[0],
                            what: format!("connection from ranks {missing:?} during handshake"),
                        });
                    }
                    thread::sleep(POLL_INTERVAL);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    let mut inbound = Vec::with_capacity(world);
    for (peer, stream) in streams.iter().enumerate() {
        let Some(stream) = stream else {
            inbound.push(None);
            continue;
        };
        stream.set_read_timeout(None)?;
        stream.set_nodelay(true)?;
        let (tx, rx) = channel();
        let reader = stream.try_clone()?;
        thread::Builder::new()
            .name(format!("gtopk-rx-{}-{peer}", my_rank.0))
            .spawn(move || read_frames(reader, peer, tx))?;
        inbound.push(Some(rx));
    }

    Ok(TcpEndpoint {
        rank: my_rank,
        world,
        streams,
        mailbox: Mailbox::new(inbound, cfg.timeout),
        stats: TransportStats::default(),
    })
}

fn remaining(deadline: Instant, rank: usize) -> Result<Duration> {
    let left = deadline.saturating_duration_since(Instant::now());
    if left.is_zero() {
        return Err(Error::Timeout {
            rank,
            what: "handshake".into(),
        });
    }
    Ok(left)
}

fn dial(addr: &str, rank: usize, deadline: Instant) -> Result<TcpStream> {
    let target = resolve(addr)?;
    loop {
        let left = remaining(deadline, rank).map_err(|_| Error::Timeout {
            rank,
            what: format!("connect to {addr}"),
        })?;
        match TcpStream::connect_timeout(&target, left.min(Duration::from_secs(1))) {
            Ok(s) => return Ok(s),
            Err(e) => {
                debug!("connect to rank {rank} at {addr}: {e}; retrying");
                thread::sleep(POLL_INTERVAL.min(deadline.saturating_duration_since(Instant::now())));
            }
        }
    }
}

fn read_rank(stream: &mut TcpStream, expected: usize) -> Result<usize> {
    let mut buf = [0u8; 4];
    stream.read_exact(&mut buf).map_err(|e| match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::Timeout {
            rank: expected,
            what: "rank announcement".into(),
        },
        _ => Error::Transport(format!("reading rank announcement: {e}")),
    })?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_frames(mut stream: TcpStream, peer: usize, tx: Sender<Inbound>) {
    let mut header = [0u8; FRAME_HEADER_BYTES];
    loop {
        match read_header(&mut stream, &mut header) {
            Ok(true) => {}
            Ok(false) => return,
            Err(e) => {
                let _ = tx.send(Inbound::Fault(e.to_string()));
                return;
            }
        }
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
        let (magic, source, tag, len) = (word(0), word(1), word(2), word(3));
        if magic != FRAME_MAGIC {
            let _ = tx.send(Inbound::Fault(format!("bad frame magic {magic:#010x}")));
            return;
        }
        if source as usize != peer {
            let _ = tx.send(Inbound::Fault(format!(
                "frame claims source {source} on the link to rank {peer}"
            )));
            return;
        }
        let mut payload = vec![0u8; len as usize];
        if let Err(e) = stream.read_exact(&mut payload) {
            let _ = tx.send(Inbound::Fault(format!("truncated frame: {e}")));
            return;
        }
        if tx.send(Inbound::Message { tag, payload }).is_err() {
            return;
        }
    }
}

/// `Ok(false)` on a clean end of stream at a frame boundary.
fn read_header(stream: &mut TcpStream, header: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < header.len() {
        match stream.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

pub(crate) fn frame(source: RankId, tag: Tag, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(FRAME_HEADER_BYTES + payload.len());
    buf.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(source.0 as u32).to_le_bytes());
    buf.extend_from_slice(&tag.to_le_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
    buf
}

impl Endpoint for TcpEndpoint {
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
        let stream = self.streams[dest.0].as_mut().expect("mesh link");
        stream
            .write_all(&frame(self.rank, tag, payload))
            .map_err(|e| Error::Transport(format!("send to rank {dest}: {e}")))?;
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

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        for stream in self.streams.iter().flatten() {
            if let Err(e) = stream.shutdown(Shutdown::Write) {
                warn!("rank {}: shutdown: {e}", self.rank);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let f = frame(RankId(3), 7, b"abc");
        assert_eq!(f.len(), FRAME_HEADER_BYTES + 3);
        assert_eq!(&f[0..4], &[0x4E, 0x52, 0x54, 0x67]);
        assert_eq!(&f[4..8], &3u32.to_le_bytes());
        assert_eq!(&f[8..12], &7u32.to_le_bytes());
        assert_eq!(&f[12..16], &3u32.to_le_bytes());
        assert_eq!(&f[16..], b"abc");
    }
}
