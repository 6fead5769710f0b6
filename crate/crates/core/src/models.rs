//! Small differentiable models and synthetic datasets that supply real
//! gradients to the optimizers.
//!
//! Parameter layouts (flattened, row-major):
//!
//! * least squares, `c` outputs: `W (c×d)`, `m = c·d`
//! * logistic regression: `w (d)`, `b`, `m = d + 1`
//! * two-layer tanh MLP, `h` hidden, `c` classes:
//!   `W1 (h×d)`, `b1 (h)`, `W2 (c×h)`, `b2 (c)`, `m = d·h + h + h·c + c`

use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, protocol, Error, Result};
use crate::scalar::Scalar;
use crate::sparse_grad::DenseVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    LeastSquares { outputs: usize },
    Logistic,
    Mlp2 { hidden: usize, classes: usize },
}

impl ModelKind {
    pub fn param_dim(&self, d: usize) -> usize {
        match *self {
            ModelKind::LeastSquares { outputs } => outputs * d,
            ModelKind::Logistic => d + 1,
            ModelKind::Mlp2 { hidden, classes } => d * hidden + hidden + hidden * classes + classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::LeastSquares { .. } => "least-squares",
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp2 { .. } => "mlp2",
        }
    }

    fn code(&self) -> u32 {
        match self {
            ModelKind::LeastSquares { .. } => 0,
            ModelKind::Logistic => 1,
            ModelKind::Mlp2 { .. } => 2,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelKind::LeastSquares { .. })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    /// `least-squares`, `logistic`, `mlp2`; defaults of one output and
    /// 16 hidden units / 2 classes.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least-squares" | "ls" => Ok(ModelKind::LeastSquares { outputs: 1 }),
            "logistic" => Ok(ModelKind::Logistic),
            "mlp2" => Ok(ModelKind::Mlp2 {
                hidden: 16,
                classes: 2,
            }),
            other => Err(invalid(format!("unknown model {other:?}"))),
        }
    }
}

/// Inputs `n×d` row-major, targets `n×target_dim` row-major. Classification
/// targets hold the class index as a float.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<T> {
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
    pub target_dim: usize,
    pub seed: u64,
    pub inputs: Vec<T>,
    pub targets: Vec<T>,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    pub fn target(&self, i: usize) -> &[T] {
        &self.targets[i * self.target_dim..(i + 1) * self.target_dim]
    }

    pub fn param_dim(&self) -> usize {
        self.kind.param_dim(self.d)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n).collect()
    }
}

pub const LS_NOISE_STD: f64 = 0.01;
const CLUSTER_SEPARATION: f64 = 1.0;

pub fn gen_dataset<T: Scalar>(kind: ModelKind, n: usize, d: usize, seed: u64) -> Result<SyntheticDataset<T>> {
    gen_dataset_with_noise(kind, n, d, seed, LS_NOISE_STD)
}

/// Least squares: `y = W* x + noise(σ)` with Gaussian `x` and hidden `W*`.
/// Classifiers: balanced Gaussian clusters centred at `±μ·1/√d` per class
/// (class `c` of `C` on a ring for `C > 2`).
pub fn gen_dataset_with_noise<T: Scalar>(
    kind: ModelKind,
    n: usize,
    d: usize,
    seed: u64,
    noise_std: f64,
) -> Result<SyntheticDataset<T>> {
    if n < 1 || d < 1 {
        return Err(invalid(format!("dataset needs n, d >= 1 (got n={n}, d={d})")));
    }
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(invalid("noise std must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets;
    let target_dim;
    match kind {
        ModelKind::LeastSquares { outputs } => {
            if outputs < 1 {
                return Err(invalid("least squares needs at least one output"));
            }
            target_dim = outputs;
            let w_star: Vec<f64> = (0..outputs * d)
                .map(|_| std.sample(&mut rng) / (d as f64).sqrt())
                .collect();
            targets = Vec::with_capacity(n * outputs);
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| std.sample(&mut rng)).collect();
                for o in 0..outputs {
                    let clean: f64 = w_star[o * d..(o + 1) * d].iter().zip(&x).map(|(w, x)| w * x).sum();
                    let noise = if noise_std > 0.0 { noise_std * std.sample(&mut rng) } else { 0.0 };
                    targets.push(T::lit(clean + noise));
                }
                inputs.extend(x.into_iter().map(T::lit));
            }
        }
        ModelKind::Logistic | ModelKind::Mlp2 { .. } => {
            let classes = match kind {
                ModelKind::Mlp2 { classes, .. } => classes,
                _ => 2,
            };
            if classes < 2 {
                return Err(invalid("classification needs at least two classes"));
            }
            target_dim = 1;
            let centres: Vec<Vec<f64>> = (0..classes)
                .map(|c| {
                    let angle = std::f64::consts::TAU * c as f64 / classes as f64;
                    (0..d)
                        .map(|j| {
                            let phase = if j % 2 == 0 { angle.cos() } else { angle.sin() };
                            CLUSTER_SEPARATION * phase / (d as f64).sqrt() * 2.0
                        })
                        .collect()
                })
                .collect();
            targets = Vec::with_capacity(n);
            for _ in 0..n {
                let c = rng.random_range(0..classes);
                for j in 0..d {
                    inputs.push(T::lit(centres[c][j] + 0.5 * std.sample(&mut rng)));
                }
                targets.push(T::lit(c as f64));
            }
        }
    }
    Ok(SyntheticDataset {
        kind,
        n,
        d,
        target_dim,
        seed,
        inputs,
        targets,
    })
}

/// Least-squares data on which tree-structured selection provably disagrees
/// with exact global selection.
///
/// Every sample is `x = shared·e₀ + e_u` with target `-1`, where `u` cycles
/// through `1..d`. At `W = 0` a batch-1 gradient is `x` itself: every worker
/// contributes the same small `shared` on coordinate 0 and a distinct unit
/// spike elsewhere. Summed over `P` workers coordinate 0 dominates, but each
/// pairwise merge prunes it in favour of the spikes.
pub fn gen_adversarial_dataset<T: Scalar>(n: usize, d: usize, shared: f64) -> Result<SyntheticDataset<T>> {
    if d < 2 || n < 1 {
        return Err(invalid("adversarial dataset needs d >= 2, n >= 1"));
    }
    let mut inputs = vec![T::zero(); n * d];
    for i in 0..n {
        inputs[i * d] = T::lit(shared);
        inputs[i * d + 1 + i % (d - 1)] = T::one();
    }
    Ok(SyntheticDataset {
        kind: ModelKind::LeastSquares { outputs: 1 },
        n,
        d,
        target_dim: 1,
        seed: 0,
        inputs,
        targets: vec![-T::one(); n],
    })
}

/// Mean loss and mean gradient of `params` over the samples in `batch`.
pub fn grad<T: Scalar>(
    ds: &SyntheticDataset<T>,
    params: &DenseVector<T>,
    batch: &[usize],
) -> Result<(T, DenseVector<T>)> {
    let m = ds.param_dim();
    if params.dim() != m {
        return Err(invalid(format!("params dim {} != model dim {m}", params.dim())));
    }
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= ds.n) {
        return Err(invalid(format!("sample {bad} out of range for n={}", ds.n)));
    }
    let w = params.as_slice();
    let mut g = vec![T::zero(); m];
    let mut loss = T::zero();
    let d = ds.d;
    match ds.kind {
        ModelKind::LeastSquares { outputs } => {
            for &i in batch {
                let x = ds.row(i);
                let y = ds.target(i);
                for o in 0..outputs {
                    let row = &w[o * d..(o + 1) * d];
                    let r = dot(row, x) - y[o];
                    loss += T::lit(0.5) * r * r;
                    for (gj, &xj) in g[o * d..(o + 1) * d].iter_mut().zip(x) {
                        *gj += r * xj;
                    }
                }
            }
        }
        ModelKind::Logistic => {
            let (wv, b) = w.split_at(d);
            for &i in batch {
                let x = ds.row(i);
                let y = ds.target(i)[0];
                let z = dot(wv, x) + b[0];
                // log(1 + e^z) - y z, computed without overflow
                loss += z.max(T::zero()) - y * z + (-z.abs()).exp().ln_1p();
                let err = sigmoid(z) - y;
                for (gj, &xj) in g[..d].iter_mut().zip(x) {
                    *gj += err * xj;
                }
                g[d] += err;
            }
        }
        ModelKind::Mlp2 { hidden, classes } => {
            let (w1, rest) = w.split_at(d * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden * classes);
            let (o_w1, o_b1, o_w2, o_b2) = (0, d * hidden, d * hidden + hidden, d * hidden + hidden + hidden * classes);
            let mut act = vec![T::zero(); hidden];
            let mut logits = vec![T::zero(); classes];
            let mut dh = vec![T::zero(); hidden];
            for &i in batch {
                let x = ds.row(i);
                let label = ds.target(i)[0].to_usize().unwrap_or(0);
                for u in 0..hidden {
                    act[u] = (dot(&w1[u * d..(u + 1) * d], x) + b1[u]).tanh();
                }
                for c in 0..classes {
                    logits[c] = dot(&w2[c * hidden..(c + 1) * hidden], &act) + b2[c];
                }
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
                loss += lse - logits[label];
                dh.iter_mut().for_each(|v| *v = T::zero());
                for c in 0..classes {
                    let delta = (logits[c] - lse).exp() - if c == label { T::one() } else { T::zero() };
                    g[o_b2 + c] += delta;
                    for u in 0..hidden {
                        g[o_w2 + c * hidden + u] += delta * act[u];
                        dh[u] += delta * w2[c * hidden + u];
                    }
                }
                for u in 0..hidden {
                    let pre = dh[u] * (T::one() - act[u] * act[u]);
                    g[o_b1 + u] += pre;
                    for (gj, &xj) in g[o_w1 + u * d..o_w1 + (u + 1) * d].iter_mut().zip(x) {
                        *gj += pre * xj;
                    }
                }
            }
        }
    }
    let nb = T::from_usize(batch.len()).unwrap();
    for v in &mut g {
        *v /= nb;
    }
    Ok((loss / nb, DenseVector::new(g)))
}

/// Mean loss only.
pub fn loss<T: Scalar>(ds: &SyntheticDataset<T>, params: &DenseVector<T>, batch: &[usize]) -> Result<T> {
    grad(ds, params, batch).map(|(l, _)| l)
}

/// Fraction of samples whose highest-scoring class matches the label.
pub fn accuracy<T: Scalar>(ds: &SyntheticDataset<T>, params: &DenseVector<T>) -> Result<f64> {
    if params.dim() != ds.param_dim() {
        return Err(invalid("params dim mismatch"));
    }
    let w = params.as_slice();
    let d = ds.d;
    let mut correct = 0usize;
    for i in 0..ds.n {
        let x = ds.row(i);
        let label = ds.target(i)[0].to_usize().unwrap_or(usize::MAX);
        let predicted = match ds.kind {
            ModelKind::LeastSquares { .. } => return Err(invalid("accuracy needs a classifier")),
            ModelKind::Logistic => usize::from(dot(&w[..d], x) + w[d] > T::zero()),
            ModelKind::Mlp2 { hidden, classes } => {
                let (w1, rest) = w.split_at(d * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden * classes);
                let act: Vec<T> = (0..hidden)
                    .map(|u| (dot(&w1[u * d..(u + 1) * d], x) + b1[u]).tanh())
                    .collect();
                (0..classes)
                    .map(|c| dot(&w2[c * hidden..(c + 1) * hidden], &act) + b2[c])
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (c, z)| if z > best.1 { (c, z) } else { best })
                    .0
            }
        };
        correct += usize::from(predicted == label);
    }
    Ok(correct as f64 / ds.n as f64)
}

/// Initial parameters: zeros for the convex models, small seeded Gaussian
/// weights for the MLP.
pub fn init_params<T: Scalar>(kind: ModelKind, d: usize, seed: u64) -> DenseVector<T> {
    let m = kind.param_dim(d);
    match kind {
        ModelKind::Mlp2 { hidden, classes } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1417);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut layer = |rows: usize, fan_in: usize| -> Vec<T> {
                let s = 1.0 / (fan_in as f64).sqrt();
                let mut v: Vec<T> = (0..rows * fan_in).map(|_| T::lit(s * normal.sample(&mut rng))).collect();
                v.extend(std::iter::repeat_n(T::zero(), rows));
                v
            };
            let mut p = layer(hidden, d);
            p.extend(layer(classes, hidden));
            DenseVector::new(p)
        }
        _ => DenseVector::zeros(m),
    }
}

/// Largest eigenvalue of the Hessian bound `(1/n) XᵀX` by power iteration,
/// scaled by 1/4 for logistic loss. `lr < 1/L` makes full-batch gradient
/// descent monotone on the convex models.
pub fn smoothness_bound<T: Scalar>(ds: &SyntheticDataset<T>, iters: usize) -> f64 {
    let d = ds.d;
    // Bias column for logistic regression.
    let extra = usize::from(ds.kind == ModelKind::Logistic);
    let dim = d + extra;
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let mut out = vec![0.0; dim];
        for i in 0..ds.n {
            let x = ds.row(i);
            let mut xv: f64 = x.iter().zip(&v).map(|(a, b)| a.as_f64() * b).sum();
            if extra == 1 {
                xv += v[d];
            }
            for j in 0..d {
                out[j] += xv * x[j].as_f64();
            }
            if extra == 1 {
                out[d] += xv;
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt() / ds.n as f64;
        lambda = norm;
        if norm == 0.0 {
            break;
        }
        let scale = 1.0 / (norm * ds.n as f64);
        v = out.into_iter().map(|x| x * scale).collect();
    }
    match ds.kind {
        ModelKind::Logistic => lambda / 4.0,
        _ => lambda,
    }
}

/// Worst single-sample smoothness, `max_i ‖x_i‖²` (plus the bias term and
/// the 1/4 factor for logistic loss). `lr ≤ 1/L` is stable for SGD at any
/// batch size, unlike the full-data bound of [`smoothness_bound`].
pub fn sample_smoothness_bound<T: Scalar>(ds: &SyntheticDataset<T>) -> f64 {
    let worst = (0..ds.n)
        .map(|i| ds.row(i).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
        .fold(0.0, f64::max);
    match ds.kind {
        ModelKind::Logistic => (worst + 1.0) / 4.0,
        _ => worst,
    }
}

/// Disjoint per-rank batches of size `b` for `iteration`: sample indices are
/// drawn from a per-epoch seeded permutation and dealt round-robin to ranks.
pub fn shard_batches<T: Scalar>(
    ds: &SyntheticDataset<T>,
    world: usize,
    b: usize,
    iteration: u64,
) -> Result<Vec<Vec<usize>>> {
    if world < 1 || b < 1 {
        return Err(invalid("need at least one worker and batch size >= 1"));
    }
    let per_iter = world * b;
    if per_iter > ds.n {
        return Err(invalid(format!(
            "{world} workers x batch {b} oversubscribes {} samples",
            ds.n
        )));
    }
    let steps_per_epoch = (ds.n / per_iter) as u64;
    let epoch = iteration / steps_per_epoch;
    let offset = (iteration % steps_per_epoch) as usize * per_iter;
    let perm = epoch_permutation(ds.n, ds.seed, epoch);
    Ok((0..world)
        .map(|r| (0..b).map(|j| perm[offset + r + j * world]).collect())
        .collect())
}

pub fn steps_per_epoch(n: usize, world: usize, b: usize) -> usize {
    (n / (world * b).max(1)).max(1)
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

const DATASET_MAGIC_BASE: u32 = 0x6744_5300;

/// Writes `ds` as: magic `u32` ("gDS1" for f32), `n u64`, `d u64`,
/// `kind u32`, `target_dim u32`, `seed u64`, then one row per sample of
/// `d` inputs followed by `target_dim` targets. Little-endian throughout.
pub fn save_dataset<T: Scalar>(ds: &SyntheticDataset<T>, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(36 + ds.n * (ds.d + ds.target_dim) * T::WIRE_BYTES);
    buf.extend_from_slice(&(DATASET_MAGIC_BASE | T::WIRE_TAG as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.n as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.d as u64).to_le_bytes());
    buf.extend_from_slice(&ds.kind.code().to_le_bytes());
    buf.extend_from_slice(&(ds.target_dim as u32).to_le_bytes());
    buf.extend_from_slice(&ds.seed.to_le_bytes());
    for i in 0..ds.n {
        for &v in ds.row(i).iter().chain(ds.target(i)) {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a file written by [`save_dataset`]. The MLP hidden width is not
/// stored; `mlp_hidden` supplies it for kind 2.
pub fn load_dataset<T: Scalar>(mut r: impl Read, mlp_hidden: usize) -> Result<SyntheticDataset<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 36 {
        return Err(protocol("dataset file truncated"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(0) != DATASET_MAGIC_BASE | T::WIRE_TAG as u32 {
        return Err(protocol(format!("bad dataset magic {:#010x}", u32_at(0))));
    }
    let (n, d) = (u64_at(4) as usize, u64_at(12) as usize);
    let target_dim = u32_at(24) as usize;
    let seed = u64_at(28);
    let kind = match u32_at(20) {
        0 => ModelKind::LeastSquares { outputs: target_dim },
        1 => ModelKind::Logistic,
        2 => ModelKind::Mlp2 {
            hidden: mlp_hidden,
            classes: 0,
        },
        other => return Err(protocol(format!("unknown dataset kind {other}"))),
    };
    let row = d + target_dim;
    let body = &bytes[36..];
    if body.len() != n * row * T::WIRE_BYTES {
        return Err(protocol("dataset body length does not match header"));
    }
    let vals: Vec<T> = body.chunks_exact(T::WIRE_BYTES).map(T::read_le).collect();
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n * target_dim);
    for chunk in vals.chunks_exact(row.max(1)) {
        inputs.extend_from_slice(&chunk[..d]);
        targets.extend_from_slice(&chunk[d..]);
    }
    let kind = match kind {
        ModelKind::Mlp2 { hidden, .. } => ModelKind::Mlp2 {
            hidden,
            classes: targets.iter().map(|t| t.to_usize().unwrap_or(0)).max().unwrap_or(0) + 1,
        },
        k => k,
    };
    Ok(SyntheticDataset {
        kind,
        n,
        d,
        target_dim,
        seed,
        inputs,
        targets,
    })
}
