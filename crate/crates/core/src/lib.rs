//! Sparse-gradient collectives and synchronous SGD.
//!
//! The library aggregates per-worker gradients three ways:
//!
//! * [`collectives::dense_ring_allreduce`]: ring reduce-scatter + allgather
//!   of the full dense gradient;
//! * [`collectives::topk_allreduce`]: every worker's top-k entries are
//!   allgathered and summed;
//! * [`collectives::gtopk_allreduce`]: top-k entries are merged pairwise up a
//!   binomial tree, keeping only the `k` largest at each node, then broadcast.
//!
//! [`optimizer::OptimizerState`] drives synchronous SGD over any of them,
//! [`models`] supplies gradients from small synthetic problems, and
//! [`cost_model`] predicts communication time under the α-β model.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below fix the common choices.

pub mod collectives;
pub mod cost_model;
mod error;
pub mod models;
pub mod optimizer;
pub mod oracle;
mod scalar;
pub mod sparse_grad;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::{ceil_log2, Scalar};

/// Gradient width used by the training harness and the wire protocol.
pub type Real = f32;

pub type DenseVectorF32 = sparse_grad::DenseVector<f32>;
pub type SparseVectorF32 = sparse_grad::SparseVector<f32>;
pub type DenseVectorF64 = sparse_grad::DenseVector<f64>;
pub type SparseVectorF64 = sparse_grad::SparseVector<f64>;
pub type GTopKResultF32 = collectives::GTopKResult<f32>;
pub type OptimizerStateF32 = optimizer::OptimizerState<f32>;
pub type OptimizerStateF64 = optimizer::OptimizerState<f64>;
pub type DatasetF32 = models::SyntheticDataset<f32>;
pub type DatasetF64 = models::SyntheticDataset<f64>;
pub type CostParamsF64 = cost_model::CostParams<f64>;
pub type FitResultF64 = cost_model::FitResult<f64>;
