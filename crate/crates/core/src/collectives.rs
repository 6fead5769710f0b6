//! Gradient aggregation collectives.
//!
//! | collective              | messages per rank        | volume per rank   |
//! |-------------------------|--------------------------|-------------------|
//! | [`dense_ring_allreduce`] | `2(P-1)`                 | `2(P-1)/P * m`    |
//! | [`topk_allreduce`]       | `P-1` (ring allgather)   | `2(P-1)k`         |
//! | [`gtopk_allreduce`]      | `≤ 2⌈log₂P⌉`             | `≤ 4k⌈log₂P⌉`     |
//!
//! Every function here is a collective call: all ranks must invoke the same
//! collectives in the same order.

use std::time::Instant;

use crate::error::{invalid, protocol, Result};
use crate::scalar::{ceil_log2, Scalar};
use crate::sparse_grad::{
    densify, top_op_with_dropped, DenseVector, IndexMask, SparseVector,
};
use crate::transport::{
    decode_sparse, encode_sparse_into, Endpoint, RankId, Tag, TransportStats, RESERVED_TAG_BASE,
};

const TAG_RING_REDUCE: Tag = RESERVED_TAG_BASE + 1;
const TAG_RING_GATHER: Tag = RESERVED_TAG_BASE + 2;
const TAG_ALLGATHER: Tag = RESERVED_TAG_BASE + 3;
const TAG_TREE_REDUCE: Tag = RESERVED_TAG_BASE + 4;
const TAG_BCAST: Tag = RESERVED_TAG_BASE + 5;

/// Bytes preceding the sparse encoding in collective messages: the sender's
/// vector dimension as `u64`.
pub const ENVELOPE_BYTES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Collective {
    DenseRing,
    AllGather,
    TopK,
    GTopK,
    Broadcast,
}

impl Collective {
    pub fn name(self) -> &'static str {
        match self {
            Collective::DenseRing => "dense",
            Collective::AllGather => "allgather",
            Collective::TopK => "topk",
            Collective::GTopK => "gtopk",
            Collective::Broadcast => "bcast",
        }
    }

    /// Communication rounds each rank steps through.
    pub fn rounds(self, world: usize) -> u32 {
        let p = world as u32;
        match self {
            Collective::DenseRing => 2 * (p.max(1) - 1),
            Collective::AllGather | Collective::TopK => p.max(1) - 1,
            Collective::GTopK => 2 * ceil_log2(world),
            Collective::Broadcast => ceil_log2(world),
        }
    }
}

/// Per-rank cost of one collective invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CollectiveStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub message_count: u64,
    pub rounds: u32,
    pub wall_time_ms: f64,
}

impl CollectiveStats {
    pub const CSV_HEADER: &'static str =
        "collective,P,m,k,rank,bytes_sent,bytes_recv,msgs,rounds,wall_ms";

    pub fn csv_row(&self, collective: &str, world: usize, m: usize, k: usize, rank: usize) -> String {
        format!(
            "{collective},{world},{m},{k},{rank},{},{},{},{},{:.6}",
            self.bytes_sent, self.bytes_received, self.message_count, self.rounds, self.wall_time_ms
        )
    }
}

/// Runs `f` and reports the traffic and time it cost on `ep`.
pub fn measure<E, R>(
    ep: &mut E,
    kind: Collective,
    f: impl FnOnce(&mut E) -> Result<R>,
) -> Result<(R, CollectiveStats)>
where
    E: Endpoint + ?Sized,
{
    let before = ep.stats();
    let start = Instant::now();
    let out = f(ep)?;
    let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let delta = ep.stats().since(&before);
    Ok((
        out,
        CollectiveStats {
            bytes_sent: delta.bytes_sent,
            bytes_received: delta.bytes_received,
            message_count: delta.messages_sent,
            rounds: kind.rounds(ep.world_size()),
            wall_time_ms,
        },
    ))
}

fn chunk_bounds(m: usize, parts: usize, c: usize) -> (usize, usize) {
    (c * m / parts, (c + 1) * m / parts)
}

fn encode_chunk<T: Scalar>(m: usize, values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + values.len() * T::WIRE_BYTES);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

fn decode_chunk<T: Scalar>(bytes: &[u8], m: usize, len: usize, from: RankId) -> Result<Vec<T>> {
    if bytes.len() < 8 {
        return Err(protocol(format!("ring chunk from rank {from} truncated")));
    }
    let their_m = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if their_m != m as u64 {
        return Err(protocol(format!(
            "dimension mismatch: rank {from} reduces {their_m} elements, local has {m}"
        )));
    }
    let body = &bytes[8..];
    if body.len() != len * T::WIRE_BYTES {
        return Err(protocol(format!("ring chunk from rank {from} has wrong length")));
    }
    Ok(body.chunks_exact(T::WIRE_BYTES).map(T::read_le).collect())
}

/// Elementwise sum over all ranks via reduce-scatter then allgather on a
/// ring, `2(P-1)` steps. Every rank returns bitwise-identical values.
///
/// Vectors shorter than `P` are handled by empty chunks.
pub fn dense_ring_allreduce<T, E>(ep: &mut E, g: &DenseVector<T>) -> Result<DenseVector<T>>
where
    T: Scalar,
    E: Endpoint + ?Sized,
{
    let p = ep.world_size();
    let r = ep.rank().0;
    let m = g.dim();
    let mut acc = g.clone();
    if p == 1 {
        return Ok(acc);
    }
    let right = RankId((r + 1) % p);
    let left = RankId((r + p - 1) % p);

    for step in 0..p - 1 {
        let send_c = (r + p - step) % p;
        let recv_c = (r + 2 * p - step - 1) % p;
        let (lo, hi) = chunk_bounds(m, p, send_c);
        ep.send(right, TAG_RING_REDUCE, &encode_chunk(m, &acc.as_slice()[lo..hi]))?;
        let (lo, hi) = chunk_bounds(m, p, recv_c);
        let incoming: Vec<T> = decode_chunk(&ep.recv(left, TAG_RING_REDUCE)?, m, hi - lo, left)?;
        for (a, b) in acc.as_mut_slice()[lo..hi].iter_mut().zip(incoming) {
            *a += b;
        }
    }
    for step in 0..p - 1 {
        let send_c = (r + 1 + p - step) % p;
        let recv_c = (r + p - step) % p;
        let (lo, hi) = chunk_bounds(m, p, send_c);
        ep.send(right, TAG_RING_GATHER, &encode_chunk(m, &acc.as_slice()[lo..hi]))?;
        let (lo, hi) = chunk_bounds(m, p, recv_c);
        let incoming: Vec<T> = decode_chunk(&ep.recv(left, TAG_RING_GATHER)?, m, hi - lo, left)?;
        acc.as_mut_slice()[lo..hi].copy_from_slice(&incoming);
    }
    Ok(acc)
}

/// Every rank receives every rank's payload, indexed by source rank.
/// Ring algorithm: `P-1` steps, each forwarding one payload. Payload sizes
/// may differ per rank.
pub fn allgather<E: Endpoint + ?Sized>(ep: &mut E, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
    let p = ep.world_size();
    let r = ep.rank().0;
    let mut out: Vec<Vec<u8>> = vec![Vec::new(); p];
    out[r] = payload.to_vec();
    if p == 1 {
        return Ok(out);
    }
    let right = RankId((r + 1) % p);
    let left = RankId((r + p - 1) % p);
    for step in 0..p - 1 {
        let send_slot = (r + p - step) % p;
        let recv_slot = (r + 2 * p - step - 1) % p;
        ep.send(right, TAG_ALLGATHER, &out[send_slot])?;
        out[recv_slot] = ep.recv(left, TAG_ALLGATHER)?;
    }
    Ok(out)
}

pub(crate) fn encode_envelope<T: Scalar>(s: &SparseVector<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(ENVELOPE_BYTES + crate::transport::encoded_len::<T>(s.nnz()));
    out.extend_from_slice(&(s.dim() as u64).to_le_bytes());
    encode_sparse_into(s, &mut out);
    out
}

pub(crate) fn decode_envelope<T: Scalar>(bytes: &[u8], dim: usize, from: RankId) -> Result<SparseVector<T>> {
    if bytes.len() < ENVELOPE_BYTES {
        return Err(protocol(format!("sparse message from rank {from} truncated")));
    }
    let their_dim = u64::from_le_bytes(bytes[..ENVELOPE_BYTES].try_into().unwrap());
    if their_dim != dim as u64 {
        return Err(protocol(format!(
            "dimension mismatch: rank {from} sent dim {their_dim}, local dim {dim}"
        )));
    }
    decode_sparse(&bytes[ENVELOPE_BYTES..], dim)
}

/// Allgathers every rank's sparse vector, decoded, indexed by rank.
pub fn sparse_allgather<T, E>(ep: &mut E, local: &SparseVector<T>) -> Result<Vec<SparseVector<T>>>
where
    T: Scalar,
    E: Endpoint + ?Sized,
{
    allgather(ep, &encode_envelope(local))?
        .iter()
        .enumerate()
        .map(|(g, bytes)| decode_envelope(bytes, local.dim(), RankId(g)))
        .collect()
}

/// `Σ_g densify(parts[g])`, scatter-added into zeros in rank order.
pub fn scatter_add<T: Scalar>(dim: usize, parts: &[SparseVector<T>]) -> DenseVector<T> {
    let mut acc = DenseVector::zeros(dim);
    let slots = acc.as_mut_slice();
    for part in parts {
        for (i, v) in part.iter() {
            slots[i as usize] += v;
        }
    }
    acc
}

/// AllGather-based sparse allreduce: the dense average
/// `(1/P) Σ_g densify(local_g)`, accumulated in rank order.
pub fn topk_allreduce<T, E>(ep: &mut E, local: &SparseVector<T>) -> Result<DenseVector<T>>
where
    T: Scalar,
    E: Endpoint + ?Sized,
{
    let parts = sparse_allgather(ep, local)?;
    let mut sum = scatter_add(local.dim(), &parts);
    let p = T::from_usize(ep.world_size()).expect("world size fits scalar");
    for v in sum.as_mut_slice() {
        *v /= p;
    }
    Ok(sum)
}

/// The globally selected entries, identical on every rank.
#[derive(Clone, Debug, PartialEq)]
pub struct GTopKResult<T> {
    pub global_topk: SparseVector<T>,
    pub global_mask: IndexMask,
}

/// Per-rank side information from one [`gtopk_allreduce_traced`] call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GTopKTrace {
    /// Σ|v| over entries this rank pruned while merging whose index still
    /// made the final selection. That mass is neither applied nor returned
    /// to any residual.
    pub lost_mass: f64,
    pub reduce_phase: TransportStats,
    pub bcast_phase: TransportStats,
    /// Merges this rank performed in the reduction phase.
    pub merges: u32,
}

/// Tree-structured global top-k allreduce. Values are summed, not averaged.
pub fn gtopk_allreduce<T, E>(ep: &mut E, local: &SparseVector<T>, k: usize) -> Result<GTopKResult<T>>
where
    T: Scalar,
    E: Endpoint + ?Sized,
{
    gtopk_allreduce_traced(ep, local, k).map(|(res, _)| res)
}

/// Binomial-tree reduction with [`top_op`](crate::sparse_grad::top_op) at
/// every inner node, followed by a binomial broadcast from rank 0.
///
/// Round `j` (1-based): rank `r` with `r mod 2^j == 2^(j-1)` sends its
/// accumulator to `r - 2^(j-1)`; rank `r` with `r mod 2^j == 0` and
/// `r + 2^(j-1) < P` receives and merges `received ⊤ own`.
pub fn gtopk_allreduce_traced<T, E>(
    ep: &mut E,
    local: &SparseVector<T>,
    k: usize,
) -> Result<(GTopKResult<T>, GTopKTrace)>
where
    T: Scalar,
    E: Endpoint + ?Sized,
{
    if local.nnz() > k {
        return Err(invalid(format!(
            "rank {} passed {} entries to a top-{k} allreduce",
            ep.rank(),
            local.nnz()
        )));
    }
    let p = ep.world_size();
    let r = ep.rank().0;
    let dim = local.dim();
    let mut trace = GTopKTrace::default();

    let start = ep.stats();
    let mut acc = local.clone();
    let mut dropped: Vec<(u64, T)> = Vec::new();
    for j in 1..=ceil_log2(p) {
        let half = 1usize << (j - 1);
        let span = half << 1;
        if r % span == half {
            ep.send(RankId(r - half), TAG_TREE_REDUCE, &encode_envelope(&acc))?;
            break;
        }
        if r.is_multiple_of(span) && r + half < p {
            let from = RankId(r + half);
            let received = decode_envelope(&ep.recv(from, TAG_TREE_REDUCE)?, dim, from)?;
            let (kept, pruned) = top_op_with_dropped(&received, &acc, k)?;
            dropped.extend(pruned.iter());
            acc = kept;
            trace.merges += 1;
        }
    }
    let mid = ep.stats();
    trace.reduce_phase = mid.since(&start);

    let root_payload = if r == 0 { encode_envelope(&acc) } else { Vec::new() };
    let bytes = binomial_bcast(ep, RankId(0), &root_payload)?;
    trace.bcast_phase = ep.stats().since(&mid);
    let global_topk = decode_envelope(&bytes, dim, RankId(0))?;
    let global_mask = global_topk.mask();

    trace.lost_mass = dropped
        .iter()
        .filter(|(i, _)| global_mask.contains(*i))
        .map(|(_, v)| v.abs().as_f64())
        .fold(0.0, |a, b| a + b);
    Ok((
        GTopKResult {
            global_topk,
            global_mask,
        },
        trace,
    ))
}

/// Binomial-tree broadcast of `payload` from `root`; `⌈log₂P⌉` rounds,
/// `P-1` messages in total. `payload` is ignored on non-root ranks.
pub fn binomial_bcast<E: Endpoint + ?Sized>(ep: &mut E, root: RankId, payload: &[u8]) -> Result<Vec<u8>> {
    let p = ep.world_size();
    if root.0 >= p {
        return Err(invalid(format!("broadcast root {root} out of range")));
    }
    let vr = (ep.rank().0 + p - root.0) % p;
    let mut data = (vr == 0).then(|| payload.to_vec());
    for j in 0..ceil_log2(p) {
        let mask = 1usize << j;
        if vr < mask {
            let dst = vr + mask;
            if dst < p {
                let buf = data.as_deref().expect("holder has payload");
                ep.send(RankId((dst + root.0) % p), TAG_BCAST, buf)?;
            }
        } else if vr < mask << 1 {
            data = Some(ep.recv(RankId((vr - mask + root.0) % p), TAG_BCAST)?);
        }
    }
    Ok(data.expect("every rank receives within ⌈log₂P⌉ rounds"))
}

/// The dense image of a [`GTopKResult`], for updates.
pub fn densify_result<T: Scalar>(res: &GTopKResult<T>) -> DenseVector<T> {
    densify(&res.global_topk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::create_local_cluster;
    use std::thread;

    fn run<R: Send>(p: usize, f: impl Fn(&mut crate::transport::LocalEndpoint) -> R + Sync) -> Vec<R> {
        let eps = create_local_cluster(p).unwrap();
        thread::scope(|s| {
            let handles: Vec<_> = eps
                .into_iter()
                .map(|mut ep| {
                    let f = &f;
                    s.spawn(move || f(&mut ep))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn ring_single_rank_is_identity() {
        let out = run(1, |ep| {
            dense_ring_allreduce(ep, &DenseVector::new(vec![1.5f32, -2.0])).unwrap()
        });
        assert_eq!(out[0].as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn ring_constant_vectors() {
        let out = run(3, |ep| {
            let v = (ep.rank().0 + 1) as f32;
            dense_ring_allreduce(ep, &DenseVector::new(vec![v; 6])).unwrap()
        });
        for o in out {
            assert_eq!(o.as_slice(), &[6.0; 6]);
        }
    }

    #[test]
    fn ring_short_vector_pads() {
        let out = run(5, |ep| {
            let v = (ep.rank().0 + 1) as f32;
            dense_ring_allreduce(ep, &DenseVector::new(vec![v, -v])).unwrap()
        });
        for o in out {
            assert_eq!(o.as_slice(), &[15.0, -15.0]);
        }
    }

    #[test]
    fn ring_dimension_mismatch() {
        let out = run(2, |ep| {
            let m = 4 + ep.rank().0;
            dense_ring_allreduce(ep, &DenseVector::<f32>::zeros(m))
        });
        assert!(out.iter().all(|r| matches!(r, Err(crate::Error::Protocol(_)))));
    }

    #[test]
    fn ring_stats() {
        let out = run(4, |ep| {
            measure(ep, Collective::DenseRing, |ep| {
                dense_ring_allreduce(ep, &DenseVector::<f32>::zeros(8))
            })
            .unwrap()
            .1
        });
        for s in out {
            assert_eq!(s.message_count, 6);
            assert_eq!(s.rounds, 6);
            // 6 chunks of 2 floats plus an 8-byte dimension header each
            assert_eq!(s.bytes_sent, 6 * (8 + 8));
            assert_eq!(s.bytes_received, s.bytes_sent);
        }
    }

    #[test]
    fn allgather_orders_by_rank() {
        let out = run(4, |ep| {
            let me = format!("rank-{}", "x".repeat(ep.rank().0));
            allgather(ep, me.as_bytes()).unwrap()
        });
        let expected: Vec<Vec<u8>> = (0..4)
            .map(|r| format!("rank-{}", "x".repeat(r)).into_bytes())
            .collect();
        for o in out {
            assert_eq!(o, expected);
        }
        assert_eq!(run(1, |ep| allgather(ep, b"solo").unwrap())[0], vec![b"solo".to_vec()]);
    }

    #[test]
    fn topk_allreduce_same_index() {
        let out = run(2, |ep| {
            let v = if ep.rank().0 == 0 { 1.0f32 } else { 3.0 };
            let s = SparseVector::new(3, vec![0], vec![v]).unwrap();
            topk_allreduce(ep, &s).unwrap()
        });
        for o in out {
            assert_eq!(o.as_slice(), &[2.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn gtopk_two_workers_matches_single_merge() {
        let out = run(2, |ep| {
            let s = if ep.rank().0 == 0 {
                SparseVector::new(5, vec![1, 3], vec![0.5f32, -2.0]).unwrap()
            } else {
                SparseVector::new(5, vec![1, 4], vec![0.6f32, 1.0]).unwrap()
            };
            gtopk_allreduce(ep, &s, 2).unwrap()
        });
        for o in &out {
            assert_eq!(o.global_topk.indices(), &[1, 3]);
            // received ⊤ own: rank 1's 0.6 first, then rank 0's 0.5
            assert_eq!(o.global_topk.values(), &[0.6f32 + 0.5, -2.0]);
            assert_eq!(o.global_mask.iter().collect::<Vec<_>>(), vec![1, 3]);
        }
    }

    #[test]
    fn gtopk_rejects_oversized_input() {
        let out = run(1, |ep| {
            let s = SparseVector::new(4, vec![0, 1], vec![1.0f32, 1.0]).unwrap();
            gtopk_allreduce(ep, &s, 1)
        });
        assert!(matches!(out[0], Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn gtopk_single_rank() {
        let out = run(1, |ep| {
            let s = SparseVector::new(4, vec![0, 2], vec![1.0f32, -1.0]).unwrap();
            gtopk_allreduce(ep, &s, 2).unwrap()
        });
        assert_eq!(out[0].global_topk.indices(), &[0, 2]);
        assert_eq!(out[0].global_mask.len(), 2);
    }

    #[test]
    fn gtopk_reports_lost_mass() {
        // Ranks 0,1 hold a unique 1.0 plus 0.4 on index 9; ranks 2,3 hold 2.0
        // on index 9 plus a unique 0.3. Rank 0's first merge prunes 9 (0.8)
        // while the right subtree carries 9 to the final selection.
        let out = run(4, |ep| {
            let r = ep.rank().0;
            let s = match r {
                0 | 1 => SparseVector::new(16, vec![r as u64, 9], vec![1.0f32, 0.4]).unwrap(),
                _ => SparseVector::new(16, vec![r as u64, 9], vec![0.3f32, 2.0]).unwrap(),
            };
            gtopk_allreduce_traced(ep, &s, 2).unwrap()
        });
        let sel = out[0].0.global_topk.indices().to_vec();
        assert_eq!(sel, vec![0, 9]);
        assert!((out[0].1.lost_mass - 0.8).abs() < 1e-6);
        assert_eq!(out[1].1.lost_mass, 0.0);
    }

    #[test]
    fn bcast_message_counts() {
        for (p, root, root_sends) in [(8usize, 0usize, 3u64), (5, 0, 3), (5, 3, 3), (6, 2, 3), (1, 0, 0)] {
            let out = run(p, |ep| {
                let payload = if ep.rank().0 == root { b"hello".to_vec() } else { Vec::new() };
                let got = binomial_bcast(ep, RankId(root), &payload).unwrap();
                (got, ep.stats())
            });
            let total: u64 = out.iter().map(|o| o.1.messages_sent).sum();
            assert_eq!(total, p as u64 - 1);
            assert_eq!(out[root].1.messages_sent, root_sends);
            for (got, _) in &out {
                assert_eq!(got, b"hello");
            }
        }
    }

    #[test]
    fn rounds_table() {
        assert_eq!(Collective::GTopK.rounds(8), 6);
        assert_eq!(Collective::DenseRing.rounds(4), 6);
        assert_eq!(Collective::TopK.rounds(1), 0);
        assert_eq!(Collective::Broadcast.rounds(5), 3);
    }
}
