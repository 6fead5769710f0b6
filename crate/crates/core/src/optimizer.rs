//! Synchronous SGD with dense, Top-k and global Top-k gradient aggregation.
//!
//! Each worker owns one [`OptimizerState`]. Steps are collective: every rank
//! calls the same step with its own mini-batch gradient, and all ranks end the
//! step holding bitwise-identical weights.
//!
//! The sparse variants keep a residual: gradient mass that was not
//! transmitted is added back before the next selection.

use std::str::FromStr;
use std::time::Instant;

use crate::collectives::{
    dense_ring_allreduce, gtopk_allreduce_traced, scatter_add, sparse_allgather, topk_allreduce,
};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::sparse_grad::{densify, top_k_select, DenseVector, IndexMask, SparseVector};
use crate::transport::Endpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Dense,
    TopK,
    GTopK,
    /// Global top-k over the full allgathered sum. Reference for the tree.
    GTopKNaive,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dense => "dense",
            Algorithm::TopK => "topk",
            Algorithm::GTopK => "gtopk",
            Algorithm::GTopKNaive => "gtopk-naive",
        }
    }

    pub fn is_sparse(self) -> bool {
        self != Algorithm::Dense
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Algorithm::Dense),
            "topk" => Ok(Algorithm::TopK),
            "gtopk" => Ok(Algorithm::GTopK),
            "gtopk-naive" => Ok(Algorithm::GTopKNaive),
            other => Err(invalid(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// How the global top-k update is scaled before it is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// Divide by `P`, matching the dense update.
    Mean,
    /// Apply the summed values as-is.
    Sum,
}

/// Summation route for the dense update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenseReduction {
    Ring,
    /// Allgather then sum from zero in rank order. Same accumulation order
    /// as the sparse allgather path, so `k = m` Top-k matches it bitwise.
    RankOrder,
}

/// Density per epoch: `warmup[e]` for the first epochs, then `terminal`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySchedule {
    pub warmup: Vec<f64>,
    pub terminal: f64,
}

pub const WARMUP_DENSITIES: [f64; 4] = [0.25, 0.0725, 0.015, 0.004];
pub const TERMINAL_DENSITY: f64 = 0.001;

impl Default for DensitySchedule {
    fn default() -> Self {
        Self {
            warmup: WARMUP_DENSITIES.to_vec(),
            terminal: TERMINAL_DENSITY,
        }
    }
}

impl DensitySchedule {
    pub fn constant(rho: f64) -> Self {
        Self {
            warmup: Vec::new(),
            terminal: rho,
        }
    }

    pub fn density_at(&self, epoch: usize) -> f64 {
        self.warmup.get(epoch).copied().unwrap_or(self.terminal)
    }

    pub fn validate(&self) -> Result<()> {
        for &rho in self.warmup.iter().chain(std::iter::once(&self.terminal)) {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(invalid(format!("density {rho} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig<T> {
    pub lr: T,
    /// Heavy-ball coefficient applied to the aggregated update; 0 disables.
    pub momentum: T,
    pub averaging: Averaging,
    pub dense_reduction: DenseReduction,
    /// Run the other global top-k route alongside gtopk/gtopk-naive steps and
    /// report how far their selections differ. Costs an extra collective;
    /// excluded from the phase timers.
    pub compare_selections: bool,
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            momentum: T::zero(),
            averaging: Averaging::Mean,
            dense_reduction: DenseReduction::Ring,
            compare_selections: false,
        }
    }
}

/// Per-step measurements. `loss` and `t_compute_ms` belong to the caller's
/// forward/backward pass; steps leave them at zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub t_compute_ms: f64,
    pub t_compress_ms: f64,
    pub t_communicate_ms: f64,
    pub selected_k: usize,
    pub lost_mass: f64,
    /// Fraction of the reference (naive) selection missing from the tree
    /// selection, when comparison is enabled.
    pub divergence: Option<f64>,
}

/// Intermediate vectors of one step, for verifying the residual identities.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace<T> {
    /// Residual plus this step's gradient, before selection.
    pub accumulated: DenseVector<T>,
    pub local_selection: Option<SparseVector<T>>,
    pub residual_after_selection: DenseVector<T>,
    pub global_mask: Option<IndexMask>,
    /// The vector subtracted from the weights, scaled by the learning rate.
    pub update: DenseVector<T>,
}

pub struct OptimizerState<T> {
    weights: DenseVector<T>,
    residual: DenseVector<T>,
    velocity: Option<DenseVector<T>>,
    iteration: u64,
    config: OptimizerConfig<T>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: DenseVector<T>, config: OptimizerConfig<T>) -> Result<Self> {
        if config.lr.is_nan() || config.lr <= T::zero() {
            return Err(invalid("learning rate must be positive"));
        }
        if config.momentum < T::zero() || config.momentum >= T::one() {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        let m = weights.dim();
        Ok(Self {
            weights,
            residual: DenseVector::zeros(m),
            velocity: None,
            iteration: 0,
            config,
        })
    }

    pub fn weights(&self) -> &DenseVector<T> {
        &self.weights
    }

    pub fn residual(&self) -> &DenseVector<T> {
        &self.residual
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &OptimizerConfig<T> {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    /// Runs one step of `algo`. `k` is ignored for [`Algorithm::Dense`].
    pub fn step<E: Endpoint + ?Sized>(
        &mut self,
        ep: &mut E,
        algo: Algorithm,
        grad: &DenseVector<T>,
        k: usize,
    ) -> Result<StepReport> {
        self.step_inner(ep, algo, grad, k, None)
    }

    /// As [`step`](Self::step), also returning the intermediate vectors.
    pub fn step_traced<E: Endpoint + ?Sized>(
        &mut self,
        ep: &mut E,
        algo: Algorithm,
        grad: &DenseVector<T>,
        k: usize,
    ) -> Result<(StepReport, StepTrace<T>)> {
        let mut trace = StepTrace {
            accumulated: DenseVector::zeros(0),
            local_selection: None,
            residual_after_selection: DenseVector::zeros(0),
            global_mask: None,
            update: DenseVector::zeros(0),
        };
        let report = self.step_inner(ep, algo, grad, k, Some(&mut trace))?;
        Ok((report, trace))
    }

    pub fn dense_step<E: Endpoint + ?Sized>(&mut self, ep: &mut E, grad: &DenseVector<T>) -> Result<StepReport> {
        self.step(ep, Algorithm::Dense, grad, 0)
    }

    pub fn topk_step<E: Endpoint + ?Sized>(&mut self, ep: &mut E, grad: &DenseVector<T>, k: usize) -> Result<StepReport> {
        self.step(ep, Algorithm::TopK, grad, k)
    }

    pub fn gtopk_step<E: Endpoint + ?Sized>(&mut self, ep: &mut E, grad: &DenseVector<T>, k: usize) -> Result<StepReport> {
        self.step(ep, Algorithm::GTopK, grad, k)
    }

    pub fn gtopk_naive_step<E: Endpoint + ?Sized>(
        &mut self,
        ep: &mut E,
        grad: &DenseVector<T>,
        k: usize,
    ) -> Result<StepReport> {
        self.step(ep, Algorithm::GTopKNaive, grad, k)
    }

    fn step_inner<E: Endpoint + ?Sized>(
        &mut self,
        ep: &mut E,
        algo: Algorithm,
        grad: &DenseVector<T>,
        k: usize,
        mut trace: Option<&mut StepTrace<T>>,
    ) -> Result<StepReport> {
        let m = self.dim();
        if grad.dim() != m {
            return Err(invalid(format!("gradient dim {} != model dim {m}", grad.dim())));
        }
        if algo.is_sparse() && (k == 0 || k > m) {
            return Err(invalid(format!("k={k} must lie in 1..={m}")));
        }
        let p = T::from_usize(ep.world_size()).expect("world size fits scalar");
        let mut report = StepReport::default();

        let update = match algo {
            Algorithm::Dense => {
                let t = Instant::now();
                let mut sum = match self.config.dense_reduction {
                    DenseReduction::Ring => dense_ring_allreduce(ep, grad)?,
                    DenseReduction::RankOrder => rank_order_sum(ep, grad)?,
                };
                for v in sum.as_mut_slice() {
                    *v /= p;
                }
                report.t_communicate_ms = ms_since(t);
                report.selected_k = m;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.accumulated = grad.clone();
                    tr.residual_after_selection = DenseVector::zeros(m);
                }
                sum
            }
            Algorithm::TopK | Algorithm::GTopK | Algorithm::GTopKNaive => {
                let t = Instant::now();
                self.residual.add_assign(grad)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.accumulated = self.residual.clone();
                }
                let (selected, rest) = top_k_select(&self.residual, k)?;
                self.residual = rest;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.local_selection = Some(selected.clone());
                    tr.residual_after_selection = self.residual.clone();
                }
                report.t_compress_ms = ms_since(t);
                report.selected_k = k;

                match algo {
                    Algorithm::TopK => {
                        let t = Instant::now();
                        let g = topk_allreduce(ep, &selected)?;
                        report.t_communicate_ms = ms_since(t);
                        g
                    }
                    _ => {
                        let t = Instant::now();
                        let global = if algo == Algorithm::GTopK {
                            let (res, tr) = gtopk_allreduce_traced(ep, &selected, k)?;
                            report.lost_mass = tr.lost_mass;
                            res.global_topk
                        } else {
                            naive_global_topk(ep, &selected, k)?
                        };
                        report.t_communicate_ms = ms_since(t);

                        let t = Instant::now();
                        let global_mask = global.mask();
                        // values selected locally but outside the global
                        // selection return to this rank's residual
                        let slots = self.residual.as_mut_slice();
                        for (i, v) in selected.iter() {
                            if !global_mask.contains(i) {
                                slots[i as usize] += v;
                            }
                        }
                        let mut update = densify(&global);
                        if self.config.averaging == Averaging::Mean {
                            for v in update.as_mut_slice() {
                                *v /= p;
                            }
                        }
                        report.t_compress_ms += ms_since(t);

                        if self.config.compare_selections {
                            let other = if algo == Algorithm::GTopK {
                                naive_global_topk(ep, &selected, k)?
                            } else {
                                gtopk_allreduce_traced(ep, &selected, k)?.0.global_topk
                            };
                            let (naive, tree) = if algo == Algorithm::GTopK {
                                (&other, &global)
                            } else {
                                (&global, &other)
                            };
                            report.divergence = Some(selection_divergence(naive, tree));
                        }
                        if let Some(tr) = trace.as_deref_mut() {
                            tr.global_mask = Some(global_mask);
                        }
                        update
                    }
                }
            }
        };

        self.apply(&update);
        if let Some(tr) = trace {
            tr.update = update;
        }
        self.iteration += 1;
        Ok(report)
    }

    fn apply(&mut self, update: &DenseVector<T>) {
        let lr = self.config.lr;
        let w = self.weights.as_mut_slice();
        if self.config.momentum.is_zero() {
            for (w, &u) in w.iter_mut().zip(update.as_slice()) {
                *w -= lr * u;
            }
            return;
        }
        let mu = self.config.momentum;
        let vel = self
            .velocity
            .get_or_insert_with(|| DenseVector::zeros(update.dim()));
        for ((w, v), &u) in w.iter_mut().zip(vel.as_mut_slice()).zip(update.as_slice()) {
            *v = mu * *v + u;
            *w -= lr * *v;
        }
    }
}

/// Allgathers dense vectors and sums them from zero in rank order.
fn rank_order_sum<T, E>(ep: &mut E, grad: &DenseVector<T>) -> Result<DenseVector<T>>
where
    T: Scalar,
    E: Endpoint + ?Sized,
{
    let mut payload = Vec::with_capacity(grad.dim() * T::WIRE_BYTES);
    for &v in grad.as_slice() {
        v.write_le(&mut payload);
    }
    let parts = crate::collectives::allgather(ep, &payload)?;
    let mut acc = DenseVector::zeros(grad.dim());
    for (g, bytes) in parts.iter().enumerate() {
        if bytes.len() != payload.len() {
            return Err(Error::Protocol(format!(
                "dimension mismatch: rank {g} sent {} bytes, expected {}",
                bytes.len(),
                payload.len()
            )));
        }
        for (a, chunk) in acc.as_mut_slice().iter_mut().zip(bytes.chunks_exact(T::WIRE_BYTES)) {
            *a += T::read_le(chunk);
        }
    }
    Ok(acc)
}

/// The `k` largest-magnitude nonzero entries of the exact sparse sum across
/// ranks, summed in rank order. Not averaged.
pub fn naive_global_topk<T, E>(ep: &mut E, local: &SparseVector<T>, k: usize) -> Result<SparseVector<T>>
where
    T: Scalar,
    E: Endpoint + ?Sized,
{
    let parts = sparse_allgather(ep, local)?;
    let sum = scatter_add(local.dim(), &parts);
    let (sel, _) = top_k_select(&sum, k.min(sum.dim()))?;
    let (i, v): (Vec<u64>, Vec<T>) = sel.iter().filter(|(_, v)| !v.is_zero()).unzip();
    SparseVector::new(local.dim(), i, v)
}

/// `|naive \ tree| / |naive|`, zero when the naive selection is empty.
pub fn selection_divergence<T: Scalar>(naive: &SparseVector<T>, tree: &SparseVector<T>) -> f64 {
    if naive.is_empty() {
        return 0.0;
    }
    let tree_mask = tree.mask();
    let missing = naive.indices().iter().filter(|&&i| !tree_mask.contains(i)).count();
    missing as f64 / naive.nnz() as f64
}
