//! Brute-force reference implementations used to verify the optimized paths.
//!
//! Nothing here shares code with the selection, merge or collective
//! implementations it checks: selection is a full sort, sums are taken over
//! dense arrays, and the reduction tree is simulated on one thread.

use std::cmp::Ordering;

use crate::scalar::{ceil_log2, Scalar};
use crate::sparse_grad::SparseVector;

fn dense_of<T: Scalar>(s: &SparseVector<T>) -> Vec<T> {
    let mut out = vec![T::zero(); s.dim()];
    for (&i, &v) in s.indices().iter().zip(s.values()) {
        out[i as usize] = v;
    }
    out
}

fn sorted_by_magnitude<T: Scalar>(g: &[T]) -> Vec<(u64, T)> {
    let mut all: Vec<(u64, T)> = g.iter().enumerate().map(|(i, &v)| (i as u64, v)).collect();
    all.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    all
}

/// Full sort by (|value| desc, index asc); first `k` kept, ascending index.
/// Returns `(selected, residual)`.
pub fn top_k_by_sort<T: Scalar>(g: &[T], k: usize) -> (Vec<(u64, T)>, Vec<T>) {
    let mut kept: Vec<(u64, T)> = sorted_by_magnitude(g).into_iter().take(k).collect();
    kept.sort_by_key(|p| p.0);
    let mut residual = g.to_vec();
    for &(i, _) in &kept {
        residual[i as usize] = T::zero();
    }
    (kept, residual)
}

/// Densify both, add `a[i] + b[i]`, drop zeros, keep the top `k` by sort.
pub fn top_op_dense<T: Scalar>(a: &SparseVector<T>, b: &SparseVector<T>, k: usize) -> SparseVector<T> {
    let (da, db) = (dense_of(a), dense_of(b));
    let sum: Vec<T> = da.iter().zip(&db).map(|(&x, &y)| x + y).collect();
    let mut kept: Vec<(u64, T)> = sorted_by_magnitude(&sum)
        .into_iter()
        .filter(|(_, v)| !v.is_zero())
        .take(k)
        .collect();
    kept.sort_by_key(|p| p.0);
    SparseVector::from_pairs(a.dim(), kept).expect("valid oracle output")
}

/// Single-threaded simulation of the binomial reduction tree: at round `j`
/// slot `r` (with `r mod 2^j == 0`) becomes `slot[r + 2^(j-1)] ⊤ slot[r]`.
pub fn tree_fold<T: Scalar>(inputs: &[SparseVector<T>], k: usize) -> SparseVector<T> {
    let p = inputs.len();
    let mut slots = inputs.to_vec();
    for j in 1..=ceil_log2(p) {
        let half = 1usize << (j - 1);
        let span = half << 1;
        for r in (0..p).step_by(span) {
            if r + half < p {
                slots[r] = top_op_dense(&slots[r + half], &slots[r], k);
            }
        }
    }
    slots.swap_remove(0)
}

/// `(Σ_g densify(inputs[g])) / P`, summed from zero in rank order.
pub fn densify_sum_divide<T: Scalar>(inputs: &[SparseVector<T>]) -> Vec<T> {
    let dim = inputs[0].dim();
    let mut acc = vec![T::zero(); dim];
    for s in inputs {
        for (a, v) in acc.iter_mut().zip(dense_of(s)) {
            *a += v;
        }
    }
    let p = T::from_usize(inputs.len()).unwrap();
    acc.into_iter().map(|v| v / p).collect()
}

/// Elementwise sum in rank order, plus the sum of magnitudes per coordinate
/// (the scale for relative error checks).
pub fn sequential_sum<T: Scalar>(inputs: &[Vec<T>]) -> (Vec<T>, Vec<T>) {
    let dim = inputs[0].len();
    let mut sum = vec![T::zero(); dim];
    let mut mag = vec![T::zero(); dim];
    for v in inputs {
        for i in 0..dim {
            sum[i] += v[i];
            mag[i] += v[i].abs();
        }
    }
    (sum, mag)
}

/// The exact global top-k of the dense sum (naive selection), summed in
/// rank order, zeros dropped.
pub fn global_top_k<T: Scalar>(inputs: &[SparseVector<T>], k: usize) -> SparseVector<T> {
    let dim = inputs[0].dim();
    let mut acc = vec![T::zero(); dim];
    for s in inputs {
        for (a, v) in acc.iter_mut().zip(dense_of(s)) {
            *a += v;
        }
    }
    let mut kept: Vec<(u64, T)> = sorted_by_magnitude(&acc)
        .into_iter()
        .filter(|(_, v)| !v.is_zero())
        .take(k)
        .collect();
    kept.sort_by_key(|p| p.0);
    SparseVector::from_pairs(dim, kept).expect("valid oracle output")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sort_oracle_example() {
        let (kept, res) = top_k_by_sort(&[0.1f32, -0.5, 0.3, 0.05], 2);
        assert_eq!(kept, vec![(1, -0.5), (2, 0.3)]);
        assert_eq!(res, vec![0.1, 0.0, 0.0, 0.05]);
    }

    #[test]
    fn tree_of_two_is_one_merge() {
        let a = SparseVector::new(5, vec![1, 3], vec![0.5f32, -2.0]).unwrap();
        let b = SparseVector::new(5, vec![1, 4], vec![0.6f32, 1.0]).unwrap();
        let got = tree_fold(&[a.clone(), b.clone()], 2);
        assert_eq!(got, top_op_dense(&b, &a, 2));
        assert_eq!(got.indices(), &[1, 3]);
    }
}
