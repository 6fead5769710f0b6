//! `gtopk bench`: times the three aggregation collectives.
//!
//! `--out` receives one [`CollectiveStats::CSV_HEADER`] row per timed
//! repetition per local rank. Stdout gets one [`SUMMARY_HEADER`] row per
//! (collective, m): mean and sample standard deviation of the per-repetition
//! wall time (slowest local rank), plus rank traffic from the last
//! repetition.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use gtopk::collectives::{dense_ring_allreduce, gtopk_allreduce, measure, topk_allreduce, Collective, CollectiveStats};
use gtopk::sparse_grad::{k_from_density, top_k_select, DenseVector, SparseVector};
use gtopk::transport::Endpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{emit, usage, ClusterArgs};

pub const SUMMARY_HEADER: &str =
    "collective,P,m,k,reps,mean_ms,std_ms,bytes_sent,bytes_recv,msgs,rounds,total_bytes_sent";

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cluster: ClusterArgs,
    /// Gradient sizes, comma separated; `1e6` notation accepted.
    #[arg(long, default_value = "1e6", value_parser = crate::parse_count_list)]
    pub m: ::std::vec::Vec<usize>,
    #[arg(long, default_value_t = 0.001)]
    pub rho: f64,
    /// Fixed k, overriding --rho.
    #[arg(long)]
    pub k: Option<usize>,
    /// Timed repetitions.
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Untimed repetitions before the timed ones.
    #[arg(long, default_value_t = 3)]
    pub warmups: usize,
    /// Any of dense, topk, gtopk, comma separated.
    #[arg(long, default_value = "dense,topk,gtopk")]
    pub algos: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Per-repetition stats CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub collective: Collective,
    pub workers: usize,
    pub m: usize,
    pub k: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Traffic of the first local rank.
    pub last: CollectiveStats,
    /// Bytes sent summed over local ranks.
    pub total_bytes_sent: u64,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{},{},{},{},{}",
            self.collective.name(),
            self.workers,
            self.m,
            self.k,
            self.reps,
            self.mean_ms,
            self.std_ms,
            self.last.bytes_sent,
            self.last.bytes_received,
            self.last.message_count,
            self.last.rounds,
            self.total_bytes_sent
        )
    }
}

fn collectives(list: &str) -> Result<Vec<Collective>> {
    list.split(',')
        .map(|s| match s.trim() {
            "dense" => Ok(Collective::DenseRing),
            "topk" => Ok(Collective::TopK),
            "gtopk" => Ok(Collective::GTopK),
            other => Err(usage(format!("unknown collective {other:?}; use dense, topk or gtopk"))),
        })
        .collect()
}

fn one_run(
    ep: &mut dyn Endpoint,
    kind: Collective,
    g: &DenseVector<f32>,
    sel: &SparseVector<f32>,
    k: usize,
) -> Result<CollectiveStats> {
    ep.barrier()?;
    let (_, stats) = match kind {
        Collective::DenseRing => measure(ep, kind, |ep| dense_ring_allreduce(ep, g).map(drop))?,
        Collective::TopK => measure(ep, kind, |ep| topk_allreduce(ep, sel).map(drop))?,
        _ => measure(ep, kind, |ep| gtopk_allreduce(ep, sel, k).map(drop))?,
    };
    Ok(stats)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Vec<BenchRow>> {
    let cluster = a.cluster.resolve()?;
    let p = cluster.world_size();
    let kinds = collectives(&a.algos)?;
    if a.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    if !(a.rho > 0.0 && a.rho <= 1.0) {
        return Err(usage("--rho must lie in (0, 1]"));
    }
    let mut detail = String::from(CollectiveStats::CSV_HEADER);
    detail.push('\n');
    let mut rows = Vec::new();
    for &m in &a.m {
        if m == 0 {
            return Err(usage("--m must be positive"));
        }
        let k = a.k.unwrap_or_else(|| k_from_density(a.rho, m)).min(m);
        // per_rank[r][kind][rep]
        let per_rank = cluster.run(a.cluster.timeout(), |ep| {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ ((ep.rank().0 as u64) << 32) ^ m as u64);
            let g = DenseVector::new((0..m).map(|_| rng.random_range(-1.0f32..1.0)).collect());
            let (sel, _) = top_k_select(&g, k)?;
            kinds
                .iter()
                .map(|&kind| {
                    for _ in 0..a.warmups {
                        one_run(ep, kind, &g, &sel, k)?;
                    }
                    (0..a.reps).map(|_| one_run(ep, kind, &g, &sel, k)).collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let first_rank = cluster.first_rank();
        for (ki, &kind) in kinds.iter().enumerate() {
            let walls: Vec<f64> = (0..a.reps)
                .map(|rep| per_rank.iter().map(|r| r[ki][rep].wall_time_ms).fold(0.0, f64::max))
                .collect();
            let mean = walls.iter().fold(0.0, |a, b| a + b) / walls.len() as f64;
            let std = if walls.len() > 1 {
                (walls.iter().map(|w| (w - mean).powi(2)).fold(0.0, |a, b| a + b) / (walls.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            for rep in 0..a.reps {
                for (i, r) in per_rank.iter().enumerate() {
                    writeln!(detail, "{}", r[ki][rep].csv_row(kind.name(), p, m, k, first_rank + i))?;
                }
            }
            rows.push(BenchRow {
                collective: kind,
                workers: p,
                m,
                k,
                reps: a.reps,
                mean_ms: mean,
                std_ms: std,
                last: per_rank[0][ki][a.reps - 1],
                total_bytes_sent: per_rank.iter().map(|r| r[ki][a.reps - 1].bytes_sent).sum(),
            });
        }
    }
    if let Some(path) = &a.out {
        emit(Some(&cluster.output_path(path)), &detail)?;
    }
    let mut text = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        writeln!(text, "{}", r.csv_row())?;
    }
    emit(None, &text)?;
    Ok(rows)
}
