//! Command-line harness for the gtopk collectives: training runs,
//! collective benchmarks, cost-model tables and self-checks.
//!
//! Every subcommand writes CSV with a header row. The in-process backend
//! (one thread per rank) is the default; `--backend tcp --rank R --hosts F`
//! joins a real cluster with one process per rank.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gtopk::transport::{
    connect_tcp_cluster, create_local_cluster_with_timeout, Backend, ClusterConfig, Endpoint, RankId,
};

pub mod bench;
pub mod cost;
pub mod selftest;
pub mod train;

#[derive(Parser, Debug)]
#[command(name = "gtopk", version, about = "Sparse-gradient collectives: train, bench, cost-model, selftest")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run synchronous SGD on a synthetic problem and log per-iteration timings.
    Train(train::TrainArgs),
    /// Time dense, top-k and global top-k allreduce.
    Bench(bench::BenchArgs),
    /// Predicted allreduce times under the alpha-beta model.
    CostModel(cost::CostArgs),
    /// Point-to-point round trips, as `size,time_ms` samples for `cost-model --fit`.
    Pingpong(cost::PingpongArgs),
    /// Run the oracle-equivalence and invariant checks at small scale.
    Selftest(selftest::SelftestArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train::cmd_train(&a).map(|_| ()),
        Command::Bench(a) => bench::cmd_bench(&a).map(|_| ()),
        Command::CostModel(a) => cost::cmd_cost_model(&a).map(|_| ()),
        Command::Pingpong(a) => cost::cmd_pingpong(&a).map(|_| ()),
        Command::Selftest(a) => selftest::cmd_selftest(&a).map(|_| ()),
    }
}

/// A flag combination that parsed but makes no sense.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for bad flags or arguments, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(gtopk::Error::InvalidArgument(_)) = cause.downcast_ref::<gtopk::Error>() {
            return 2;
        }
    }
    1
}

/// Parses `1000`, `1e6` or `2.5e3` as a whole number.
pub fn parse_count(s: &str) -> Result<usize, String> {
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    let f: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if f < 0.0 || f.fract() != 0.0 || !f.is_finite() || f > u64::MAX as f64 {
        return Err(format!("not a whole number: {s:?}"));
    }
    Ok(f as usize)
}

/// Comma-separated list of [`parse_count`] values.
pub fn parse_count_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|p| parse_count(p.trim())).collect()
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("not a number: {p:?}")))
        .collect()
}

#[derive(Args, Debug, Clone)]
pub struct ClusterArgs {
    /// Number of workers (in-process). Taken from the hosts file with tcp.
    #[arg(long = "P")]
    pub workers: Option<usize>,
    /// `in-process` or `tcp`.
    #[arg(long, default_value = "in-process")]
    pub backend: Backend,
    /// This process's rank (tcp only).
    #[arg(long)]
    pub rank: Option<usize>,
    /// Hosts file with one `rank host port` line per rank (tcp only).
    #[arg(long)]
    pub hosts: Option<PathBuf>,
    /// Seconds to wait for a peer before failing.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
}

pub(crate) enum Cluster {
    InProcess(usize),
    Tcp { config: ClusterConfig, rank: usize },
}

impl ClusterArgs {
    pub(crate) fn resolve(&self) -> Result<Cluster> {
        if self.timeout.is_nan() || self.timeout <= 0.0 {
            return Err(usage("--timeout must be positive"));
        }
        let timeout = Duration::from_secs_f64(self.timeout);
        match self.backend {
            Backend::InProcess => {
                if self.rank.is_some() || self.hosts.is_some() {
                    return Err(usage("--rank and --hosts need --backend tcp"));
                }
                let p = self.workers.unwrap_or(4);
                if p == 0 {
                    return Err(usage("--P must be at least 1"));
                }
                Ok(Cluster::InProcess(p))
            }
            Backend::Tcp => {
                let (Some(rank), Some(hosts)) = (self.rank, &self.hosts) else {
                    return Err(usage("--backend tcp needs --rank and --hosts"));
                };
                let text = fs::read_to_string(hosts).with_context(|| format!("reading {}", hosts.display()))?;
                let mut config = ClusterConfig::from_hosts(&text)?;
                config.timeout = timeout;
                if let Some(p) = self.workers {
                    if p != config.world_size {
                        return Err(usage(format!(
                            "--P {p} disagrees with the {} ranks in {}",
                            config.world_size,
                            hosts.display()
                        )));
                    }
                }
                if rank >= config.world_size {
                    return Err(usage(format!("--rank {rank} out of range for {} ranks", config.world_size)));
                }
                Ok(Cluster::Tcp { config, rank })
            }
        }
    }

    pub(crate) fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout)
    }
}

impl Cluster {
    pub(crate) fn world_size(&self) -> usize {
        match self {
            Cluster::InProcess(p) => *p,
            Cluster::Tcp { config, .. } => config.world_size,
        }
    }

    /// Runs `f` once per local rank: every rank on its own thread in
    /// process, or this process's single rank over tcp. Results are in rank
    /// order; tcp returns one.
    pub(crate) fn run<R, F>(&self, timeout: Duration, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(&mut dyn Endpoint) -> Result<R> + Sync,
    {
        match self {
            Cluster::InProcess(p) => {
                let eps = create_local_cluster_with_timeout(*p, timeout)?;
                thread::scope(|s| {
                    let handles: Vec<_> = eps
                        .into_iter()
                        .map(|mut ep| {
                            let f = &f;
                            thread::Builder::new()
                                .name(format!("rank-{}", ep.rank()))
                                .spawn_scoped(s, move || f(&mut ep))
                                .expect("spawn worker thread")
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("worker thread panicked"))))
                        .collect()
                })
            }
            Cluster::Tcp { config, rank } => {
                let mut ep = connect_tcp_cluster(config, RankId(*rank))?;
                let out = f(&mut ep)?;
                ep.barrier()?;
                Ok(vec![out])
            }
        }
    }

    pub(crate) fn first_rank(&self) -> usize {
        match self {
            Cluster::InProcess(_) => 0,
            Cluster::Tcp { rank, .. } => *rank,
        }
    }

    /// Output path for this process: ranks other than 0 get a `.rank<r>` suffix.
    pub(crate) fn output_path(&self, path: &Path) -> PathBuf {
        match self.first_rank() {
            0 => path.to_path_buf(),
            r => {
                let mut s = path.as_os_str().to_owned();
                s.push(format!(".rank{r}"));
                PathBuf::from(s)
            }
        }
    }
}

/// Writes `text` to `path`, or to stdout when `path` is `None`.
pub(crate) fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}
