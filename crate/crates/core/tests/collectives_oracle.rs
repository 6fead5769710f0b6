mod common;

use gtopk::collectives::{
    dense_ring_allreduce, gtopk_allreduce, gtopk_allreduce_traced, measure, topk_allreduce, Collective,
};
use gtopk::oracle;
use gtopk::sparse_grad::{top_k_select, DenseVector, SparseVector};
use gtopk::transport::Endpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::run;

const WORLDS: [usize; 7] = [1, 2, 3, 4, 5, 8, 16];

/// Local top-k selections with values on a coarse grid, so that exact
/// cancellations and magnitude ties both occur.
fn random_inputs(rng: &mut ChaCha8Rng, p: usize, m: usize, k: usize) -> Vec<SparseVector<f32>> {
    (0..p)
        .map(|_| {
            let g: Vec<f32> = (0..m)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(-4i32..=4) as f32 * 0.25
                    } else {
                        rng.random_range(-1.0f32..1.0)
                    }
                })
                .collect();
            top_k_select(&DenseVector::new(g), k).unwrap().0
        })
        .collect()
}

fn bits(s: &SparseVector<f32>) -> (Vec<u64>, Vec<u32>) {
    (s.indices().to_vec(), s.values().iter().map(|v| v.to_bits()).collect())
}

#[test]
fn gtopk_matches_tree_fold_and_topk_matches_dense_sum() {
    let trials = 150;
    for &p in &WORLDS {
        let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
        for _ in 0..trials {
            let m = rng.random_range(1..=64);
            let k = rng.random_range(1..=8.min(m));
            let inputs = random_inputs(&mut rng, p, m, k);
            let results = run(p, |ep| {
                let local = &inputs[ep.rank().0];
                let g = gtopk_allreduce(ep, local, k).unwrap();
                let t = topk_allreduce(ep, local).unwrap();
                (g, t)
            });
            let tree = oracle::tree_fold(&inputs, k);
            let dense = oracle::densify_sum_divide(&inputs);
            for (g, t) in &results {
                assert_eq!(bits(&g.global_topk), bits(&tree), "P={p} m={m} k={k}");
                assert_eq!(g.global_mask, tree.mask());
                let want: Vec<u32> = dense.iter().map(|v| v.to_bits()).collect();
                let got: Vec<u32> = t.as_slice().iter().map(|v| v.to_bits()).collect();
                assert_eq!(got, want, "P={p} m={m}");
            }
        }
    }
}

#[test]
fn ring_matches_sequential_sum() {
    for &p in &WORLDS {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + p as u64);
        for _ in 0..100 {
            let m = rng.random_range(1..=64);
            let grads: Vec<Vec<f32>> = (0..p)
                .map(|_| (0..m).map(|_| rng.random_range(-10.0f32..10.0)).collect())
                .collect();
            let results = run(p, |ep| {
                dense_ring_allreduce(ep, &DenseVector::new(grads[ep.rank().0].clone())).unwrap()
            });
            let (sum, mag) = oracle::sequential_sum(&grads);
            for r in &results {
                assert_eq!(r.to_bits(), results[0].to_bits());
                for i in 0..m {
                    assert!((r[i] - sum[i]).abs() <= 1e-4 * mag[i].max(f32::MIN_POSITIVE));
                }
            }
        }
    }
}

#[test]
fn gtopk_agreement_containment_cardinality() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let p = WORLDS[rng.random_range(0..WORLDS.len())];
        let m = rng.random_range(8..=64);
        let k = rng.random_range(1..=8);
        let inputs: Vec<SparseVector<f32>> = (0..p)
            .map(|_| {
                let g: Vec<f32> = (0..m).map(|_| rng.random_range(0.1f32..1.0)).collect();
                top_k_select(&DenseVector::new(g), k).unwrap().0
            })
            .collect();
        let results = run(p, |ep| gtopk_allreduce(ep, &inputs[ep.rank().0], k).unwrap());
        for r in &results {
            assert_eq!(r, &results[0]);
        }
        let g = &results[0].global_topk;
        // positive values never cancel, and each input alone has k entries
        assert_eq!(g.nnz(), k);
        for &i in g.indices() {
            assert!(inputs.iter().any(|s| s.get(i).is_some()));
        }
    }
}

#[test]
fn rank0_message_counts_for_powers_of_two() {
    let k = 4;
    for n in 1..=5u32 {
        let p = 1usize << n;
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let inputs = random_inputs(&mut rng, p, 64, k);
        let traces = run(p, |ep| {
            let (_, tr) = gtopk_allreduce_traced(ep, &inputs[ep.rank().0], k).unwrap();
            tr
        });
        let t0 = &traces[0];
        assert_eq!(t0.reduce_phase.messages_received, n as u64, "P={p}");
        assert_eq!(t0.reduce_phase.messages_sent, 0);
        assert_eq!(t0.bcast_phase.messages_sent, n as u64);
        assert_eq!(t0.merges, n);
        let bcast_total: u64 = traces.iter().map(|t| t.bcast_phase.messages_sent).sum();
        assert_eq!(bcast_total, p as u64 - 1);
    }
}

#[test]
fn collective_stats_rounds() {
    let stats = run(8, |ep| {
        let local = SparseVector::new(16, vec![ep.rank().0 as u64], vec![1.0f32]).unwrap();
        let (_, s) = measure(ep, Collective::GTopK, |ep| gtopk_allreduce(ep, &local, 2)).unwrap();
        s
    });
    assert!(stats.iter().all(|s| s.rounds == 6));
    assert_eq!(stats[0].message_count, 3);
}
