//! `gtopk train`: synchronous SGD on a synthetic problem.
//!
//! Training log columns:
//! `iteration,epoch,loss,rho,k,t_compute_ms,t_compress_ms,t_communicate_ms,lost_mass`.
//! In process, `loss` is the mean of the ranks' batch losses, phase times are
//! the slowest rank's and `lost_mass` is summed over ranks. Over tcp each
//! process logs its own rank.
//!
//! The summary row ([`SUMMARY_HEADER`]) goes to `--summary` or stdout.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::Args;
use gtopk::models::{self, ModelKind};
use gtopk::optimizer::{Algorithm, Averaging, DensitySchedule, OptimizerConfig, OptimizerState, WARMUP_DENSITIES};
use gtopk::sparse_grad::k_from_density;
use gtopk::transport::Endpoint;
use gtopk::{DatasetF32, DenseVectorF32};
use log::info;

use crate::{emit, parse_f64_list, usage, ClusterArgs};

pub const LOG_HEADER: &str = "iteration,epoch,loss,rho,k,t_compute_ms,t_compress_ms,t_communicate_ms,lost_mass";
pub const SUMMARY_HEADER: &str = "algo,P,model,m,n,b,lr,iterations,final_k,final_loss,accuracy,divergence_rate,\
lost_mass_total,wall_ms,t_compute_ms,t_compress_ms,t_communicate_ms";

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// dense, topk, gtopk or gtopk-naive.
    #[arg(long, default_value = "gtopk")]
    pub algo: Algorithm,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    /// least-squares, logistic or mlp2.
    #[arg(long, default_value = "least-squares")]
    pub model: String,
    /// Parameter count. For least squares this sets the number of outputs
    /// (m / d); for the other models it must match the architecture.
    #[arg(long, value_parser = crate::parse_count)]
    pub m: Option<usize>,
    /// Input dimension.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Hidden units (mlp2).
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Classes (mlp2).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// `synthetic`, or `adversarial`: least-squares rows `shared·e0 + e_u`
    /// on which tree merging prunes the globally largest coordinate.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Weight of the coordinate every adversarial sample shares.
    #[arg(long, default_value_t = 0.4)]
    pub shared: f64,
    /// Samples in the synthetic dataset.
    #[arg(long, default_value_t = 4096, value_parser = crate::parse_count)]
    pub n: usize,
    /// Mini-batch size per worker.
    #[arg(long, default_value_t = 16)]
    pub b: usize,
    /// Learning rate. Defaults to 1/L for the convex models, with L the
    /// largest single-sample smoothness constant, and 0.1 for mlp2.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Heavy-ball momentum on the aggregated update.
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// `mean` divides the aggregated gradient by P; `sum` does not.
    #[arg(long, default_value = "mean")]
    pub averaging: String,
    /// Passes over the data; ignored when --iters is given.
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long)]
    pub iters: Option<u64>,
    /// Density after the warmup epochs.
    #[arg(long, default_value_t = 0.001)]
    pub rho: f64,
    /// Per-epoch warmup densities, e.g. "0.25,0.0725,0.015,0.004", or `default` for 0.25,0.0725,0.015,0.004.
    #[arg(long, default_value = "")]
    pub warmup: String,
    /// Fixed k, overriding the density schedule.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Training log CSV. Not written when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary CSV; stdout when absent.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Also run the other global top-k route (tree vs allgather) every step
    /// and report how often their selections differ.
    #[arg(long)]
    pub compare: bool,
    /// Write zeros in the timing columns so logs are bitwise reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
    pub rho: f64,
    pub k: usize,
    pub t_compute_ms: f64,
    pub t_compress_ms: f64,
    pub t_communicate_ms: f64,
    pub lost_mass: f64,
    pub divergence: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub algo: Algorithm,
    pub workers: usize,
    pub model: ModelKind,
    pub m: usize,
    pub n: usize,
    pub b: usize,
    pub lr: f64,
    pub iterations: u64,
    pub final_k: usize,
    pub final_loss: f64,
    pub accuracy: Option<f64>,
    pub divergence_rate: Option<f64>,
    pub lost_mass_total: f64,
    pub wall_ms: f64,
    pub t_compute_ms: f64,
    pub t_compress_ms: f64,
    pub t_communicate_ms: f64,
}

impl TrainSummary {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.algo.name(),
            self.workers,
            self.model.name(),
            self.m,
            self.n,
            self.b,
            self.lr,
            self.iterations,
            self.final_k,
            self.final_loss,
            opt(self.accuracy),
            opt(self.divergence_rate),
            self.lost_mass_total,
            self.wall_ms,
            self.t_compute_ms,
            self.t_compress_ms,
            self.t_communicate_ms
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub log: Vec<LogRow>,
}

struct Plan {
    algo: Algorithm,
    kind: ModelKind,
    d: usize,
    m: usize,
    b: usize,
    iters: u64,
    steps_per_epoch: usize,
    schedule: DensitySchedule,
    k: Option<usize>,
    seed: u64,
    config: OptimizerConfig<f32>,
}

struct WorkerOutput {
    rows: Vec<LogRow>,
    weights: DenseVectorF32,
}

fn model_kind(a: &TrainArgs) -> Result<ModelKind> {
    let kind: ModelKind = a.model.parse().map_err(|e: gtopk::Error| usage(e.to_string()))?;
    if a.d == 0 {
        return Err(usage("--d must be at least 1"));
    }
    let kind = match kind {
        ModelKind::LeastSquares { .. } => {
            let outputs = match a.m {
                Some(m) if m == 0 || m % a.d != 0 => {
                    return Err(usage(format!("least-squares --m {m} must be a positive multiple of --d {}", a.d)))
                }
                Some(m) => m / a.d,
                None => 1,
            };
            ModelKind::LeastSquares { outputs }
        }
        ModelKind::Mlp2 { .. } => {
            if a.hidden == 0 || a.classes < 2 {
                return Err(usage("mlp2 needs --hidden >= 1 and --classes >= 2"));
            }
            ModelKind::Mlp2 {
                hidden: a.hidden,
                classes: a.classes,
            }
        }
        other => other,
    };
    if let Some(m) = a.m {
        if m != kind.param_dim(a.d) {
            return Err(usage(format!(
                "--m {m} does not match {} with d={}: it has {} parameters",
                kind.name(),
                a.d,
                kind.param_dim(a.d)
            )));
        }
    }
    Ok(kind)
}

fn schedule(a: &TrainArgs) -> Result<DensitySchedule> {
    let warmup = match a.warmup.trim() {
        "default" => WARMUP_DENSITIES.to_vec(),
        s => parse_f64_list(s).map_err(usage)?,
    };
    let s = DensitySchedule {
        warmup,
        terminal: a.rho,
    };
    s.validate().map_err(|e| usage(e.to_string()))?;
    Ok(s)
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let cluster = a.cluster.resolve()?;
    let p = cluster.world_size();
    let kind = model_kind(a)?;
    let schedule = schedule(a)?;
    let averaging = match a.averaging.as_str() {
        "mean" => Averaging::Mean,
        "sum" => Averaging::Sum,
        other => return Err(usage(format!("--averaging must be mean or sum, not {other:?}"))),
    };
    if a.b == 0 || a.b * p > a.n {
        return Err(usage(format!("--b {} x {p} workers needs 1..={} samples per batch", a.b, a.n)));
    }
    let m = kind.param_dim(a.d);
    if let Some(k) = a.k {
        if k == 0 || k > m {
            return Err(usage(format!("--k {k} must lie in 1..={m}")));
        }
    }

    let ds: DatasetF32 = match a.dataset.as_str() {
        "synthetic" => models::gen_dataset(kind, a.n, a.d, a.seed)?,
        "adversarial" if kind == (ModelKind::LeastSquares { outputs: 1 }) => {
            models::gen_adversarial_dataset(a.n, a.d, a.shared)?
        }
        "adversarial" => return Err(usage("--dataset adversarial needs least-squares with m = d")),
        other => return Err(usage(format!("unknown dataset {other:?}"))),
    };
    let lr = match a.lr {
        Some(lr) => lr,
        None if kind.is_classifier() && !matches!(kind, ModelKind::Logistic) => 0.1,
        None => 1.0 / models::sample_smoothness_bound(&ds),
    };
    let mut config = OptimizerConfig::new(lr as f32);
    config.momentum = a.momentum as f32;
    config.averaging = averaging;
    config.compare_selections = a.compare && matches!(a.algo, Algorithm::GTopK | Algorithm::GTopKNaive);
    let steps_per_epoch = models::steps_per_epoch(a.n, p, a.b);
    let plan = Plan {
        algo: a.algo,
        kind,
        d: a.d,
        m,
        b: a.b,
        iters: a.iters.unwrap_or((a.epochs * steps_per_epoch) as u64),
        steps_per_epoch,
        schedule,
        k: a.k,
        seed: a.seed,
        config,
    };
    info!(
        "train {} P={p} model={} m={m} lr={lr} iters={}",
        plan.algo.name(),
        kind.name(),
        plan.iters
    );

    let start = Instant::now();
    let outputs = cluster.run(a.cluster.timeout(), |ep| worker(ep, &plan, &ds))?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let weights = &outputs[0].weights;
    if outputs.iter().any(|o| o.weights.to_bits() != weights.to_bits()) {
        bail!("replicas disagree after training");
    }
    let log = merge_logs(&outputs, a.no_timing);
    let all = ds.all_indices();
    let final_loss = models::loss(&ds, weights, &all)? as f64;
    let accuracy = if kind.is_classifier() {
        Some(models::accuracy(&ds, weights)?)
    } else {
        None
    };
    let compared: Vec<f64> = log.iter().filter_map(|r| r.divergence).collect();
    let divergence_rate = (!compared.is_empty()).then(|| compared.iter().fold(0.0, |a, b| a + b) / compared.len() as f64);
    let timing = if a.no_timing { 0.0 } else { 1.0 };
    let summary = TrainSummary {
        algo: a.algo,
        workers: p,
        model: kind,
        m,
        n: a.n,
        b: a.b,
        lr,
        iterations: plan.iters,
        final_k: log.last().map_or(0, |r| r.k),
        final_loss,
        accuracy,
        divergence_rate,
        lost_mass_total: log.iter().map(|r| r.lost_mass).fold(0.0, |a, b| a + b),
        wall_ms: wall_ms * timing,
        t_compute_ms: log.iter().map(|r| r.t_compute_ms).fold(0.0, |a, b| a + b),
        t_compress_ms: log.iter().map(|r| r.t_compress_ms).fold(0.0, |a, b| a + b),
        t_communicate_ms: log.iter().map(|r| r.t_communicate_ms).fold(0.0, |a, b| a + b),
    };

    if let Some(path) = &a.out {
        let mut text = String::with_capacity(64 * (log.len() + 1));
        text.push_str(LOG_HEADER);
        text.push('\n');
        for r in &log {
            writeln!(
                text,
                "{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.epoch,
                r.loss,
                r.rho,
                r.k,
                r.t_compute_ms,
                r.t_compress_ms,
                r.t_communicate_ms,
                r.lost_mass
            )?;
        }
        emit(Some(&cluster.output_path(path)), &text)?;
    }
    let summary_path = a.summary.as_ref().map(|p| cluster.output_path(p));
    emit(
        summary_path.as_deref(),
        &format!("{SUMMARY_HEADER}\n{}\n", summary.csv_row()),
    )?;
    Ok(TrainOutcome { summary, log })
}

fn worker(ep: &mut dyn Endpoint, plan: &Plan, ds: &DatasetF32) -> Result<WorkerOutput> {
    let p = ep.world_size();
    let rank = ep.rank().0;
    let init = models::init_params(plan.kind, plan.d, plan.seed);
    let mut state = OptimizerState::new(init, plan.config.clone())?;
    let mut rows = Vec::with_capacity(plan.iters as usize);
    for it in 0..plan.iters {
        let epoch = (it / plan.steps_per_epoch as u64) as usize;
        let rho = plan.schedule.density_at(epoch);
        let k = plan.k.unwrap_or_else(|| k_from_density(rho, plan.m)).min(plan.m);
        let batch = models::shard_batches(ds, p, plan.b, it)?.swap_remove(rank);

        let t = Instant::now();
        let (loss, g) = models::grad(ds, state.weights(), &batch)?;
        let t_compute_ms = t.elapsed().as_secs_f64() * 1e3;

        let report = state.step(&mut *ep, plan.algo, &g, k)?;
        rows.push(LogRow {
            iteration: it,
            epoch,
            loss: loss as f64,
            rho,
            k: report.selected_k,
            t_compute_ms,
            t_compress_ms: report.t_compress_ms,
            t_communicate_ms: report.t_communicate_ms,
            lost_mass: report.lost_mass,
            divergence: report.divergence,
        });
    }
    Ok(WorkerOutput {
        rows,
        weights: state.weights().clone(),
    })
}

/// Mean loss, slowest phase times and total lost mass across ranks.
fn merge_logs(outputs: &[WorkerOutput], no_timing: bool) -> Vec<LogRow> {
    let n = outputs.len() as f64;
    (0..outputs[0].rows.len())
        .map(|i| {
            let rows: Vec<&LogRow> = outputs.iter().map(|o| &o.rows[i]).collect();
            let max = |f: fn(&LogRow) -> f64| {
                if no_timing {
                    0.0
                } else {
                    rows.iter().map(|r| f(r)).fold(0.0, f64::max)
                }
            };
            LogRow {
                loss: rows.iter().map(|r| r.loss).fold(0.0, |a, b| a + b) / n,
                t_compute_ms: max(|r| r.t_compute_ms),
                t_compress_ms: max(|r| r.t_compress_ms),
                t_communicate_ms: max(|r| r.t_communicate_ms),
                lost_mass: rows.iter().map(|r| r.lost_mass).fold(0.0, |a, b| a + b),
                ..rows[0].clone()
            }
        })
        .collect()
}
