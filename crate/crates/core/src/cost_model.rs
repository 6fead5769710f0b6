//! α-β communication time models for the three aggregation algorithms.
//!
//! A message of `n` elements between two nodes costs `α + n·β`. Logs are
//! base 2; every model is zero for a single worker.

use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::sparse_grad::k_from_density;

/// Latency and per-element time measured on 1 GbE, in milliseconds.
pub const ONE_GBE_ALPHA_MS: f64 = 0.436;
pub const ONE_GBE_BETA_MS: f64 = 3.6e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams<T> {
    /// Per-message latency, ms.
    pub alpha: T,
    /// Per-element transfer time, ms.
    pub beta: T,
    pub workers: usize,
    pub m: usize,
    pub rho: f64,
}

impl<T: Float> CostParams<T> {
    pub fn new(alpha: T, beta: T, workers: usize, m: usize, rho: f64) -> Result<Self> {
        let p = Self {
            alpha,
            beta,
            workers,
            m,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > T::zero() && self.beta > T::zero()) {
            return Err(invalid("alpha and beta must be positive"));
        }
        if self.workers < 1 {
            return Err(invalid("need at least one worker"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid(format!("density {} outside (0, 1]", self.rho)));
        }
        Ok(())
    }

    /// `max(1, round(ρ·m))`.
    pub fn k(&self) -> usize {
        k_from_density(self.rho, self.m)
    }

    fn p(&self) -> T {
        T::from(self.workers).unwrap()
    }

    fn log_p(&self) -> T {
        self.p().log2()
    }
}

impl CostParams<f64> {
    /// Latency and bandwidth measured on 1 GbE Ethernet.
    pub fn one_gbe(workers: usize, m: usize, rho: f64) -> Result<Self> {
        Self::new(ONE_GBE_ALPHA_MS, ONE_GBE_BETA_MS, workers, m, rho)
    }
}

/// Ring AllReduce: `2(P-1)α + 2((P-1)/P)·m·β`.
pub fn t_dense<T: Float>(p: &CostParams<T>) -> T {
    if p.workers <= 1 {
        return T::zero();
    }
    let two = T::from(2).unwrap();
    let pm1 = p.p() - T::one();
    two * pm1 * p.alpha + two * (pm1 / p.p()) * T::from(p.m).unwrap() * p.beta
}

/// AllGather of `2k` values per worker: `log₂(P)·α + 2(P-1)·k·β`.
///
/// The latency term prices a recursive-doubling allgather; the ring
/// allgather in [`crate::collectives`] takes `P-1` latency steps instead.
pub fn t_topk<T: Float>(p: &CostParams<T>) -> T {
    if p.workers <= 1 {
        return T::zero();
    }
    let k = T::from(p.k()).unwrap();
    p.log_p() * p.alpha + T::from(2).unwrap() * (p.p() - T::one()) * k * p.beta
}

/// Tree reduction plus broadcast: `2α·log₂P + 4kβ·log₂P`.
pub fn t_gtopk<T: Float>(p: &CostParams<T>) -> T {
    if p.workers <= 1 {
        return T::zero();
    }
    let k = T::from(p.k()).unwrap();
    let lg = p.log_p();
    T::from(2).unwrap() * p.alpha * lg + T::from(4).unwrap() * k * p.beta * lg
}

/// Weak-scaling efficiency `(t_f + t_b) / (t_f + t_b + t_c)`.
pub fn scaling_efficiency<T: Float>(t_forward: T, t_backward: T, t_comm: T) -> Result<T> {
    let compute = t_forward + t_backward;
    if t_forward < T::zero() || t_backward < T::zero() || t_comm < T::zero() {
        return Err(invalid("times must be non-negative"));
    }
    if compute.is_nan() || compute <= T::zero() {
        return Err(invalid("compute time must be positive"));
    }
    Ok(compute / (compute + t_comm))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitResult<T> {
    pub alpha: T,
    pub beta: T,
    pub rss: T,
    pub samples: usize,
}

/// Ordinary least squares for `time = α + β·size` over `(size, time_ms)`
/// samples; α is clipped at zero.
pub fn fit_alpha_beta<T: Float>(samples: &[(T, T)]) -> Result<FitResult<T>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateFit(format!("{n} samples; need at least 2 distinct sizes")));
    }
    let nf = T::from(n).unwrap();
    let mean_x = samples.iter().fold(T::zero(), |a, s| a + s.0) / nf;
    let mean_y = samples.iter().fold(T::zero(), |a, s| a + s.1) / nf;
    let (sxx, sxy) = samples.iter().fold((T::zero(), T::zero()), |(sxx, sxy), &(x, y)| {
        let dx = x - mean_x;
        (sxx + dx * dx, sxy + dx * (y - mean_y))
    });
    if sxx <= T::zero() {
        return Err(Error::DegenerateFit("all sample sizes are equal".into()));
    }
    let beta = sxy / sxx;
    let alpha = (mean_y - beta * mean_x).max(T::zero());
    let rss = samples.iter().fold(T::zero(), |acc, &(x, y)| {
        let r = y - (alpha + beta * x);
        acc + r * r
    });
    Ok(FitResult {
        alpha,
        beta,
        rss,
        samples: n,
    })
}

pub const CURVE_CSV_HEADER: &str = "algorithm,P,m,rho,predicted_ms";

/// One predicted-time row per algorithm for every `(P, m)` combination.
pub fn model_curve_rows(alpha: f64, beta: f64, workers: &[usize], ms: &[usize], rho: f64) -> Result<Vec<String>> {
    let mut rows = Vec::new();
    for &m in ms {
        for &p in workers {
            let params = CostParams::new(alpha, beta, p, m, rho)?;
            for (name, t) in [
                ("dense", t_dense(&params)),
                ("topk", t_topk(&params)),
                ("gtopk", t_gtopk(&params)),
            ] {
                rows.push(format!("{name},{p},{m},{rho},{t:.6}"));
            }
        }
    }
    Ok(rows)
}
