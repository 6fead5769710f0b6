//! Dense and sparse gradient representations, top-k selection and the
//! pairwise top-k merge used by the tree reduction.
//!
//! Selection always keeps exactly `k` entries. Magnitude ties are broken in
//! favour of the smaller index, which makes every selection a total order and
//! keeps results identical across ranks and runs.

use std::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// A length-`m` gradient or parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> DenseVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self[i] += other[i]` for every coordinate, `self` on the left.
    pub fn add_assign(&mut self, other: &DenseVector<T>) -> Result<()> {
        check_dims(self.dim(), other.dim())?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| !v.is_zero()).count()
    }

    /// Bit patterns of every coordinate, for bitwise comparisons.
    pub fn to_bits(&self) -> Vec<u64> {
        self.values
            .iter()
            .map(|v| {
                let mut b = Vec::with_capacity(8);
                v.write_le(&mut b);
                b.resize(8, 0);
                u64::from_le_bytes(b.try_into().unwrap())
            })
            .collect()
    }
}

impl<T> std::ops::Index<usize> for DenseVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl<T: Scalar> From<Vec<T>> for DenseVector<T> {
    fn from(values: Vec<T>) -> Self {
        Self::new(values)
    }
}

/// `k` (index, value) pairs out of a length-`dim` vector, indices strictly
/// increasing. Stored as parallel index/value arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVector<T> {
    dim: usize,
    indices: Vec<u64>,
    values: Vec<T>,
}

impl<T: Scalar> SparseVector<T> {
    pub fn new(dim: usize, indices: Vec<u64>, values: Vec<T>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(invalid(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        validate_indices(dim, &indices).map_err(Error::InvalidArgument)?;
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    /// Builds from unordered pairs; duplicates are rejected.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(u64, T)>) -> Result<Self> {
        pairs.sort_by_key(|p| p.0);
        let (indices, values) = pairs.into_iter().unzip();
        Self::new(dim, indices, values)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn from_parts_unchecked(dim: usize, indices: Vec<u64>, values: Vec<T>) -> Self {
        debug_assert!(validate_indices(dim, &indices).is_ok());
        Self {
            dim,
            indices,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, T)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, index: u64) -> Option<T> {
        self.indices
            .binary_search(&index)
            .ok()
            .map(|pos| self.values[pos])
    }

    pub fn mask(&self) -> IndexMask {
        IndexMask::from_sorted(self.dim, &self.indices)
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

pub(crate) fn validate_indices(dim: usize, indices: &[u64]) -> std::result::Result<(), String> {
    for w in indices.windows(2) {
        if w[0] >= w[1] {
            return Err(format!("indices not strictly increasing: {} then {}", w[0], w[1]));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= dim as u64 {
            return Err(format!("index {last} out of range for dim {dim}"));
        }
    }
    Ok(())
}

/// A subset of `0..dim`, equivalent to a {0,1}-valued dense vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMask {
    dim: usize,
    words: Vec<u64>,
}

impl IndexMask {
    pub fn none(dim: usize) -> Self {
        Self {
            dim,
            words: vec![0; dim.div_ceil(64)],
        }
    }

    pub fn all(dim: usize) -> Self {
        Self::none(dim).complement()
    }

    pub fn from_indices(dim: usize, indices: impl IntoIterator<Item = u64>) -> Result<Self> {
        let mut mask = Self::none(dim);
        for i in indices {
            if i >= dim as u64 {
                return Err(invalid(format!("mask index {i} out of range for dim {dim}")));
            }
            mask.insert(i as usize);
        }
        Ok(mask)
    }

    fn from_sorted(dim: usize, indices: &[u64]) -> Self {
        let mut mask = Self::none(dim);
        for &i in indices {
            mask.insert(i as usize);
        }
        mask
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, i: u64) -> bool {
        let i = i as usize;
        i < self.dim && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        let tail = self.dim % 64;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        Self {
            dim: self.dim,
            words,
        }
    }

    pub fn intersect(&self, other: &IndexMask) -> Result<Self> {
        check_dims(self.dim, other.dim)?;
        Ok(Self {
            dim: self.dim,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a & b)
                .collect(),
        })
    }

    /// Selected indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &bits)| {
            let mut bits = bits;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros();
                bits &= bits - 1;
                Some((w * 64 + tz as usize) as u64)
            })
        })
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Descending magnitude, ascending index. Inputs are finite.
#[inline]
fn rank_order<T: Scalar>(a: (u64, T), b: (u64, T)) -> Ordering {
    b.1.abs()
        .partial_cmp(&a.1.abs())
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// `k = max(1, round(rho * m))`, clamped to `m`.
pub fn k_from_density(rho: f64, m: usize) -> usize {
    let k = (rho * m as f64).round().max(1.0) as usize;
    k.min(m.max(1))
}

/// Splits `g` into its `k` largest-magnitude entries and the remainder.
///
/// `densify(selected) + residual == g` holds exactly: kept values are copied,
/// never touched by arithmetic.
pub fn top_k_select<T: Scalar>(
    g: &DenseVector<T>,
    k: usize,
) -> Result<(SparseVector<T>, DenseVector<T>)> {
    let m = g.dim();
    if k == 0 || k > m {
        return Err(invalid(format!("k={k} must lie in 1..={m}")));
    }
    if !g.is_finite() {
        return Err(Error::NumericDomain(
            "top-k selection over non-finite gradient".into(),
        ));
    }
    let vals = g.as_slice();
    let mut order: Vec<u64> = (0..m as u64).collect();
    if k < m {
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            rank_order((a, vals[a as usize]), (b, vals[b as usize]))
        });
        order.truncate(k);
    }
    order.sort_unstable();

    let mut residual = g.clone();
    let mut values = Vec::with_capacity(k);
    for &i in &order {
        values.push(vals[i as usize]);
        residual.values[i as usize] = T::zero();
    }
    Ok((SparseVector::from_parts_unchecked(m, order, values), residual))
}

/// The pairwise top-k merge: the `k` largest-magnitude entries of `a + b`.
///
/// Each coordinate is summed as `a[i] + b[i]`. Coordinates that cancel to
/// exactly zero are dropped, so the result may hold fewer than `k` entries.
pub fn top_op<T: Scalar>(
    a: &SparseVector<T>,
    b: &SparseVector<T>,
    k: usize,
) -> Result<SparseVector<T>> {
    let (kept, _) = top_op_with_dropped(a, b, k)?;
    Ok(kept)
}

/// As [`top_op`], also returning the nonzero merged entries that fell
/// outside the top `k`.
pub fn top_op_with_dropped<T: Scalar>(
    a: &SparseVector<T>,
    b: &SparseVector<T>,
    k: usize,
) -> Result<(SparseVector<T>, SparseVector<T>)> {
    check_dims(a.dim, b.dim)?;
    let merged = merge_sum(a, b);
    if merged.len() <= k {
        let (indices, values) = merged.into_iter().unzip();
        return Ok((
            SparseVector::from_parts_unchecked(a.dim, indices, values),
            SparseVector::empty(a.dim),
        ));
    }
    let mut ranked = merged;
    if k > 0 {
        ranked.select_nth_unstable_by(k - 1, |&x, &y| rank_order(x, y));
    }
    let mut dropped = ranked.split_off(k);
    ranked.sort_unstable_by_key(|p| p.0);
    dropped.sort_unstable_by_key(|p| p.0);
    let (ki, kv) = ranked.into_iter().unzip();
    let (di, dv) = dropped.into_iter().unzip();
    Ok((
        SparseVector::from_parts_unchecked(a.dim, ki, kv),
        SparseVector::from_parts_unchecked(a.dim, di, dv),
    ))
}

/// Sorted union of `a` and `b` with overlapping values summed `a + b`;
/// exact zeros omitted.
fn merge_sum<T: Scalar>(a: &SparseVector<T>, b: &SparseVector<T>) -> Vec<(u64, T)> {
    let mut out = Vec::with_capacity(a.nnz() + b.nnz());
    let (mut i, mut j) = (0, 0);
    while i < a.nnz() || j < b.nnz() {
        let entry = match (a.indices.get(i), b.indices.get(j)) {
            (Some(&ia), Some(&ib)) if ia == ib => {
                i += 1;
                j += 1;
                (ia, a.values[i - 1] + b.values[j - 1])
            }
            (Some(&ia), Some(&ib)) if ia < ib => {
                i += 1;
                (ia, a.values[i - 1])
            }
            (Some(&ia), None) => {
                i += 1;
                (ia, a.values[i - 1])
            }
            (_, Some(&ib)) => {
                j += 1;
                (ib, b.values[j - 1])
            }
            (None, None) => unreachable!(),
        };
        if !entry.1.is_zero() {
            out.push(entry);
        }
    }
    out
}

pub fn densify<T: Scalar>(s: &SparseVector<T>) -> DenseVector<T> {
    let mut out = DenseVector::zeros(s.dim);
    for (i, v) in s.iter() {
        out.values[i as usize] = v;
    }
    out
}

/// `g ⊙ keep`: coordinates outside the mask become zero.
pub fn masked_extract<T: Scalar>(g: &DenseVector<T>, keep: &IndexMask) -> Result<DenseVector<T>> {
    check_dims(g.dim(), keep.dim())?;
    let mut out = DenseVector::zeros(g.dim());
    for i in keep.iter() {
        out.values[i as usize] = g.values[i as usize];
    }
    Ok(out)
}
