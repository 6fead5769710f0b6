//! `gtopk selftest`: the oracle-equivalence and invariant checks at small
//! scale. Prints `PASS name` or `FAIL name: detail` per property and fails
//! with the list of failing names.

use std::thread;

use anyhow::{bail, Result};
use clap::Args;
use gtopk::collectives::{dense_ring_allreduce, gtopk_allreduce, gtopk_allreduce_traced, topk_allreduce};
use gtopk::cost_model::{t_dense, t_gtopk, t_topk, CostParams};
use gtopk::models::{self, ModelKind};
use gtopk::optimizer::{Algorithm, DensitySchedule, OptimizerConfig, OptimizerState};
use gtopk::oracle;
use gtopk::sparse_grad::{densify, top_k_select, top_op, DenseVector, SparseVector};
use gtopk::transport::{create_local_cluster, decode_sparse, encode_sparse, Endpoint, LocalEndpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Args, Debug, Clone, Default)]
pub struct SelftestArgs {
    /// Corrupt the named property's result before checking it.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

type Check = fn(bool) -> Result<(), String>;

pub const CHECKS: [(&str, Check); 11] = [
    ("codec-roundtrip", codec_roundtrip),
    ("topk-select-vs-sort", select_vs_sort),
    ("top-op-vs-dense-merge", top_op_vs_dense),
    ("gtopk-vs-tree-fold", gtopk_vs_tree_fold),
    ("topk-vs-densify-sum", topk_vs_dense_sum),
    ("ring-vs-sequential-sum", ring_vs_sequential),
    ("gtopk-message-count", gtopk_message_count),
    ("residual-identities", residual_identities),
    ("warmup-schedule", warmup_schedule),
    ("cost-model-constants", cost_model_constants),
    ("gradient-finite-difference", gradient_fd),
];

pub fn run_checks(fault: Option<&str>) -> Vec<(&'static str, Result<(), String>)> {
    CHECKS
        .iter()
        .map(|&(name, check)| (name, check(fault == Some(name))))
        .collect()
}

pub fn cmd_selftest(a: &SelftestArgs) -> Result<()> {
    if let Some(f) = &a.inject_fault {
        if !CHECKS.iter().any(|c| c.0 == f) {
            return Err(crate::usage(format!("no property named {f:?}")));
        }
    }
    let mut failed = Vec::new();
    for (name, res) in run_checks(a.inject_fault.as_deref()) {
        match res {
            Ok(()) => println!("PASS {name}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        bail!("failing properties: {}", failed.join(", "));
    }
    Ok(())
}

fn on_cluster<R: Send>(p: usize, f: impl Fn(&mut LocalEndpoint) -> R + Sync) -> Vec<R> {
    let eps = create_local_cluster(p).expect("local cluster");
    thread::scope(|s| {
        let hs: Vec<_> = eps
            .into_iter()
            .map(|mut ep| {
                let f = &f;
                s.spawn(move || f(&mut ep))
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("worker")).collect()
    })
}

fn random_dense(rng: &mut ChaCha8Rng, m: usize) -> DenseVector<f32> {
    DenseVector::new(
        (0..m)
            .map(|_| {
                if rng.random_bool(0.3) {
                    rng.random_range(-4i32..=4) as f32 * 0.25
                } else {
                    rng.random_range(-1.0f32..1.0)
                }
            })
            .collect(),
    )
}

fn random_selection(rng: &mut ChaCha8Rng, m: usize, k: usize) -> SparseVector<f32> {
    top_k_select(&random_dense(rng, m), k).expect("valid k").0
}

fn bump(s: &SparseVector<f32>) -> SparseVector<f32> {
    let mut pairs: Vec<(u64, f32)> = s.iter().collect();
    match pairs.first_mut() {
        Some(p) => p.1 += 1.0,
        None => pairs.push((0, 1.0)),
    }
    SparseVector::from_pairs(s.dim(), pairs).expect("same indices")
}

fn codec_roundtrip(fault: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = rng.random_range(1..=256);
        let k = rng.random_range(1..=m);
        let s = random_selection(&mut rng, m, k);
        let mut bytes = encode_sparse(&s);
        if fault {
            let last = bytes.len() - 1;
            bytes[last] ^= 0x40;
        }
        let back: SparseVector<f32> = decode_sparse(&bytes, m).map_err(|e| e.to_string())?;
        if back != s {
            return Err(format!("decode(encode(s)) != s for m={m}, nnz={}", s.nnz()));
        }
    }
    Ok(())
}

fn select_vs_sort(fault: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let m = rng.random_range(1..=64);
        let k = rng.random_range(1..=m);
        let g = random_dense(&mut rng, m);
        let (sel, res) = top_k_select(&g, k).map_err(|e| e.to_string())?;
        let sel = if fault { bump(&sel) } else { sel };
        let (want, want_res) = oracle::top_k_by_sort(g.as_slice(), k);
        if sel.iter().collect::<Vec<_>>() != want || res.as_slice() != want_res.as_slice() {
            return Err(format!("selection differs from full sort, m={m} k={k}"));
        }
    }
    Ok(())
}

fn top_op_vs_dense(fault: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let m = rng.random_range(1..=64);
        let k = rng.random_range(1..=8.min(m));
        let a = random_selection(&mut rng, m, k);
        let b = random_selection(&mut rng, m, k);
        let got = top_op(&a, &b, k).map_err(|e| e.to_string())?;
        let got = if fault { bump(&got) } else { got };
        if got != oracle::top_op_dense(&a, &b, k) {
            return Err(format!("merge differs from dense oracle, m={m} k={k}"));
        }
    }
    Ok(())
}

fn gtopk_vs_tree_fold(fault: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in [1, 2, 3, 5, 8] {
        for _ in 0..20 {
            let m = rng.random_range(1..=64);
            let k = rng.random_range(1..=8.min(m));
            let inputs: Vec<_> = (0..p).map(|_| random_selection(&mut rng, m, k)).collect();
            let out = on_cluster(p, |ep| gtopk_allreduce(ep, &inputs[ep.rank().0], k));
            let want = oracle::tree_fold(&inputs, k);
            for r in out {
                let got = r.map_err(|e| e.to_string())?.global_topk;
                let got = if fault { bump(&got) } else { got };
                if got != want {
                    return Err(format!("P={p} m={m} k={k}: tree allreduce != single-threaded fold"));
                }
            }
        }
    }
    Ok(())
}

fn topk_vs_dense_sum(fault: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in [1, 2, 3, 5, 8] {
        for _ in 0..20 {
            let m = rng.random_range(1..=64);
            let k = rng.random_range(1..=8.min(m));
            let inputs: Vec<_> = (0..p).map(|_| random_selection(&mut rng, m, k)).collect();
            let out = on_cluster(p, |ep| topk_allreduce(ep, &inputs[ep.rank().0]));
            let want = oracle::densify_sum_divide(&inputs);
            for r in out {
                let mut got = r.map_err(|e| e.to_string())?.into_inner();
                if fault {
                    got[0] += 1.0;
                }
                if got.iter().map(|v| v.to_bits()).ne(want.iter().map(|v| v.to_bits())) {
                    return Err(format!("P={p} m={m}: allgather sum != densify-sum-divide"));
                }
            }
        }
    }
    Ok(())
}

fn ring_vs_sequential(fault: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in [1, 2, 3, 5, 8] {
        for _ in 0..20 {
            let m = rng.random_range(1..=64);
            let grads: Vec<Vec<f32>> = (0..p).map(|_| random_dense(&mut rng, m).into_inner()).collect();
            let out = on_cluster(p, |ep| dense_ring_allreduce(ep, &DenseVector::new(grads[ep.rank().0].clone())));
            let (sum, mag) = oracle::sequential_sum(&grads);
            for r in out {
                let mut got = r.map_err(|e| e.to_string())?.into_inner();
                if fault {
                    got[0] += 1.0;
                }
                for i in 0..m {
                    if (got[i] - sum[i]).abs() > 1e-4 * mag[i].max(f32::MIN_POSITIVE) {
                        return Err(format!("P={p} m={m} i={i}: ring {} vs sum {}", got[i], sum[i]));
                    }
                }
            }
        }
    }
    Ok(())
}

fn gtopk_message_count(fault: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..=4u32 {
        let p = 1usize << n;
        let inputs: Vec<_> = (0..p).map(|_| random_selection(&mut rng, 32, 4)).collect();
        let traces = on_cluster(p, |ep| gtopk_allreduce_traced(ep, &inputs[ep.rank().0], 4).map(|r| r.1));
        let t0 = traces.into_iter().next().unwrap().map_err(|e| e.to_string())?;
        let received = t0.reduce_phase.messages_received + u64::from(fault);
        if received != n as u64 || t0.bcast_phase.messages_sent != n as u64 {
            return Err(format!(
                "P={p}: rank 0 received {received} and broadcast {} messages, expected {n}",
                t0.bcast_phase.messages_sent
            ));
        }
    }
    Ok(())
}

fn residual_identities(fault: bool) -> Result<(), String> {
    let m = 24;
    let out = on_cluster(4, |ep| -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(8 + ep.rank().0 as u64);
        let mut st = OptimizerState::new(DenseVector::zeros(m), OptimizerConfig::new(0.1f32)).map_err(|e| e.to_string())?;
        for step in 0..100 {
            let algo = if step % 2 == 0 { Algorithm::TopK } else { Algorithm::GTopK };
            let g = random_dense(&mut rng, m);
            let k = 1 + step % m;
            let (_, tr) = st.step_traced(ep, algo, &g, k).map_err(|e| e.to_string())?;
            let mut sel = densify(tr.local_selection.as_ref().unwrap());
            if fault {
                sel.as_mut_slice()[0] += 1.0;
            }
            for i in 0..m {
                if (sel[i] + tr.residual_after_selection[i]).to_bits() != tr.accumulated[i].to_bits() {
                    return Err(format!("step {step}: mass not conserved at {i}"));
                }
                let extra = match &tr.global_mask {
                    Some(mask) if !mask.contains(i as u64) => sel[i],
                    _ => 0.0,
                };
                if (tr.residual_after_selection[i] + extra).to_bits() != st.residual()[i].to_bits() {
                    return Err(format!("step {step}: extra residual wrong at {i}"));
                }
            }
        }
        Ok(())
    });
    out.into_iter().collect()
}

fn warmup_schedule(fault: bool) -> Result<(), String> {
    let s = DensitySchedule::default();
    let want = [0.25, 0.0725, 0.015, 0.004, 0.001, 0.001];
    for (epoch, &w) in want.iter().enumerate() {
        let got = s.density_at(epoch) + if fault { 1e-9 } else { 0.0 };
        if got != w {
            return Err(format!("epoch {epoch}: {got} != {w}"));
        }
    }
    Ok(())
}

fn cost_model_constants(fault: bool) -> Result<(), String> {
    let p = CostParams::one_gbe(32, 25_000_000, 0.001).map_err(|e| e.to_string())?;
    let skew = if fault { 1.01 } else { 1.0 };
    for (name, got, want) in [
        ("dense", t_dense(&p) * skew, 1770.78),
        ("topk", t_topk(&p), 57.98),
        ("gtopk", t_gtopk(&p), 22.36),
    ] {
        if ((got - want) / want).abs() > 1e-3 {
            return Err(format!("{name}: {got} ms, expected {want}"));
        }
    }
    Ok(())
}

fn gradient_fd(fault: bool) -> Result<(), String> {
    let kinds = [
        ModelKind::LeastSquares { outputs: 2 },
        ModelKind::Logistic,
        ModelKind::Mlp2 { hidden: 4, classes: 3 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in kinds {
        let ds = models::gen_dataset::<f64>(kind, 16, 4, 9).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let w: Vec<f64> = (0..ds.param_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let batch = [rng.random_range(0..ds.n)];
            let (_, mut g) = models::grad(&ds, &DenseVector::new(w.clone()), &batch).map_err(|e| e.to_string())?;
            if fault {
                g.as_mut_slice()[0] += 1.0;
            }
            for i in 0..w.len() {
                let h = 1e-3;
                let at = |delta: f64| {
                    let mut v = w.clone();
                    v[i] += delta;
                    models::loss(&ds, &DenseVector::new(v), &batch).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let err = (fd - g[i]).abs();
                if err > 1e-5 && err > 1e-2 * fd.abs().max(g[i].abs()) {
                    return Err(format!("{}: coordinate {i}: analytic {} vs numeric {fd}", kind.name(), g[i]));
                }
            }
        }
    }
    Ok(())
}
