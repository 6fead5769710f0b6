//! `gtopk cost-model` and `gtopk pingpong`.
//!
//! `cost-model` prints [`CURVE_CSV_HEADER`] rows for every (P, m) in the
//! sweep, using the `paper-1gbe` constants, explicit `--alpha/--beta`, or a
//! least-squares fit to a `size,time_ms` CSV such as `pingpong` writes.
//! Sizes count 4-byte elements.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::thread;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use gtopk::cost_model::{fit_alpha_beta, model_curve_rows, CURVE_CSV_HEADER, ONE_GBE_ALPHA_MS, ONE_GBE_BETA_MS};
use gtopk::transport::{connect_tcp_cluster, create_local_cluster, Backend, ClusterConfig, Endpoint, RankId};
use gtopk::FitResultF64;
use log::info;

use crate::{emit, usage};

#[derive(Args, Debug, Clone)]
pub struct CostArgs {
    /// Named (alpha, beta) constants; `paper-1gbe` (alias `1gbe`) is 0.436 ms
    /// and 3.6e-5 ms.
    #[arg(long, default_value = "paper-1gbe")]
    pub preset: String,
    /// Fit alpha and beta to this `size,time_ms` CSV instead of the preset.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Worker counts to sweep.
    #[arg(long = "P", default_value = "4,8,16,32,64,128", value_parser = crate::parse_count_list)]
    pub workers: ::std::vec::Vec<usize>,
    /// Model sizes to sweep.
    #[arg(long, default_value = "25e6", value_parser = crate::parse_count_list)]
    pub m: ::std::vec::Vec<usize>,
    #[arg(long, default_value_t = 0.001)]
    pub rho: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub alpha: f64,
    pub beta: f64,
    pub fit: Option<FitResultF64>,
    pub rows: Vec<String>,
}

pub fn read_samples(path: &std::path::Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| usage(format!("{} has no {name:?} column", path.display())))
    };
    let (size, time) = (col("size")?, col("time_ms")?);
    let mut samples = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| usage(format!("{} row {}: bad number", path.display(), line + 2)))
        };
        samples.push((field(size)?, field(time)?));
    }
    Ok(samples)
}

pub fn cmd_cost_model(a: &CostArgs) -> Result<CostTable> {
    let (mut alpha, mut beta, fit) = match &a.fit {
        Some(path) => {
            let fit = fit_alpha_beta(&read_samples(path)?)?;
            info!("fit: alpha={} beta={} rss={} samples={}", fit.alpha, fit.beta, fit.rss, fit.samples);
            (fit.alpha, fit.beta, Some(fit))
        }
        None => match a.preset.as_str() {
            "paper-1gbe" | "1gbe" => (ONE_GBE_ALPHA_MS, ONE_GBE_BETA_MS, None),
            other => return Err(usage(format!("unknown preset {other:?}"))),
        },
    };
    if let Some(v) = a.alpha {
        alpha = v;
    }
    if let Some(v) = a.beta {
        beta = v;
    }
    // a fit may legitimately clip alpha to zero; the models need it positive
    if fit.is_some() && alpha == 0.0 {
        alpha = f64::MIN_POSITIVE;
    }
    let rows = model_curve_rows(alpha, beta, &a.workers, &a.m, a.rho)?;
    let mut text = format!("{CURVE_CSV_HEADER}\n");
    for r in &rows {
        writeln!(text, "{r}")?;
    }
    emit(a.out.as_deref(), &text)?;
    Ok(CostTable { alpha, beta, fit, rows })
}

#[derive(Args, Debug, Clone)]
pub struct PingpongArgs {
    /// Message sizes in 4-byte elements.
    #[arg(long, default_value = "1,16,256,4096,65536,1048576", value_parser = crate::parse_count_list)]
    pub sizes: ::std::vec::Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmups: usize,
    /// `in-process`, or `tcp` over two localhost sockets.
    #[arg(long, default_value = "in-process")]
    pub backend: Backend,
    /// First of two consecutive localhost ports for tcp.
    #[arg(long, default_value_t = 47000)]
    pub port: u16,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One-way time per message: half a measured round trip.
fn bounce(a: &mut dyn Endpoint, b: &mut dyn Endpoint, payload: &[u8]) -> Result<f64> {
    let t = Instant::now();
    a.send(RankId(1), 1, payload)?;
    let got = b.recv(RankId(0), 1)?;
    b.send(RankId(0), 2, &got)?;
    a.recv(RankId(1), 2)?;
    Ok(t.elapsed().as_secs_f64() * 1e3 / 2.0)
}

pub fn cmd_pingpong(a: &PingpongArgs) -> Result<Vec<(f64, f64)>> {
    if a.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let (mut e0, mut e1): (Box<dyn Endpoint>, Box<dyn Endpoint>) = match a.backend {
        Backend::InProcess => {
            let mut eps = create_local_cluster(2)?;
            let e1 = eps.pop().unwrap();
            (Box::new(eps.pop().unwrap()), Box::new(e1))
        }
        Backend::Tcp => {
            let next = a.port.checked_add(1).ok_or_else(|| usage("--port too large"))?;
            let cfg = ClusterConfig::tcp(vec![format!("127.0.0.1:{}", a.port), format!("127.0.0.1:{next}")]);
            let peer_cfg = cfg.clone();
            let peer = thread::spawn(move || connect_tcp_cluster(&peer_cfg, RankId(1)));
            let e0 = connect_tcp_cluster(&cfg, RankId(0))?;
            let e1 = peer.join().map_err(|_| anyhow::anyhow!("connect thread panicked"))??;
            (Box::new(e0), Box::new(e1))
        }
    };
    let mut samples = Vec::new();
    let mut text = String::from("size,time_ms\n");
    for &n in &a.sizes {
        let payload = vec![0u8; n * 4];
        for rep in 0..a.warmups + a.reps {
            let t = bounce(&mut *e0, &mut *e1, &payload)?;
            if rep >= a.warmups {
                samples.push((n as f64, t));
                writeln!(text, "{n},{t:.6}")?;
            }
        }
    }
    emit(a.out.as_deref(), &text)?;
    Ok(samples)
}
