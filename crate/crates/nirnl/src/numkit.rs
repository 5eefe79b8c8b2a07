//! Dense matrix primitives, similarity/activation scalars, seeded
//! randomness, and finite-difference gradient verification.
//!
//! `Matrix<T>` defaults to `f32` (training storage). The numeric kernels are
//! generic so the same formulas can be instantiated at `f64`, which is what
//! [`grad_check`] requires: central differences on a 32-bit loss cannot
//! resolve a 1e-4 tolerance.

use std::sync::atomic::{AtomicU64, Ordering};

use anyhow::{bail, ensure, Result};
use num_traits::Float;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix. Entries must stay finite; constructors and loaders
/// enforce this at the I/O boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Ok(Self { rows, cols, data })
    }

    /// Build from nested row slices; rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            ensure!(r.len() == cols, "row {} has length {}, expected {}", i, r.len(), cols);
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select the given rows into a new matrix, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(indices.len(), self.cols);
        for (i, &src) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(src));
        }
        out
    }

    /// C = A · B  (A is n×k, B is k×m).
    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows, "matmul dim mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(i);
                for j in 0..other.cols {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        out
    }

    /// C = A · Bᵀ  (A is n×k, B is m×k): pairwise row dot products.
    pub fn matmul_nt(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.cols, "matmul_nt dim mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                out.set(i, j, dot(arow, other.row(j)));
            }
        }
        out
    }

    /// C = Aᵀ · B  (A is n×p, B is n×q).
    pub fn matmul_tn(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, other.rows, "matmul_tn dim mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for i in 0..self.cols {
                let a = arow[i];
                if a == T::zero() {
                    continue;
                }
                let orow = out.row_mut(i);
                for j in 0..other.cols {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        out
    }
}

impl Matrix<f32> {
    /// Widen to f64 for verification-grade arithmetic.
    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

pub fn norm2<T: Float>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

static DEGENERATE_COSINES: AtomicU64 = AtomicU64::new(0);

/// Number of cosine calls that hit a zero-norm input since the last reset.
pub fn degenerate_cosine_count() -> u64 {
    DEGENERATE_COSINES.load(Ordering::Relaxed)
}

pub fn reset_degenerate_cosine_count() {
    DEGENERATE_COSINES.store(0, Ordering::Relaxed);
}

/// Cosine similarity in [-1, 1]. Zero-norm inputs yield 0 (zero embeddings
/// occur transiently at initialization and must not poison training); each
/// such call bumps the process-wide degenerate counter.
pub fn cosine_similarity<T: Float>(a: &[T], b: &[T]) -> T {
    let (v, degenerate) = cosine_similarity_flagged(a, b);
    if degenerate {
        DEGENERATE_COSINES.fetch_add(1, Ordering::Relaxed);
    }
    v
}

/// Cosine similarity plus a flag marking the zero-norm degenerate case.
pub fn cosine_similarity_flagged<T: Float>(a: &[T], b: &[T]) -> (T, bool) {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let na = norm2(a);
    let nb = norm2(b);
    if na == T::zero() || nb == T::zero() {
        return (T::zero(), true);
    }
    (dot(a, b) / (na * nb), false)
}

/// max(0, x).
pub fn hinge<T: Float>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Deterministic seeded generator. ChaCha8 is counter-based and produces the
/// same stream on every platform; sub-streams for parallel or staged work are
/// derived from the root seed and a task index via SplitMix64.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a task index; same (seed, index) gives the same
    /// stream everywhere.
    pub fn derive(&self, task_index: u64) -> Rng {
        Rng::seed_from(splitmix64(self.seed ^ splitmix64(task_index)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index bound must be positive");
        self.inner.gen_range(0..n)
    }

    /// Uniform f32 in [lo, hi).
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.inner.gen_range(lo..hi)
    }

    /// Standard normal via Box-Muller; two uniforms per pair of calls would
    /// complicate stream accounting, so each call burns two draws.
    pub fn normal(&mut self) -> f32 {
        let u1: f64 = self.inner.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.inner.gen_range(0.0..1.0);
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            slice.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from [0, n), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {} from {}", k, n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.inner.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Verify an analytic gradient against central differences.
///
/// `f` evaluates the loss and its analytic gradient at a parameter vector;
/// everything runs at f64. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)` with probes at ±`eps`.
pub fn grad_check<F>(f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    ensure!(eps > 0.0, "eps must be positive");
    let (loss0, analytic) = f(params)?;
    ensure!(loss0.is_finite(), "loss is not finite at the base point");
    ensure!(
        analytic.len() == params.len(),
        "analytic gradient length {} does not match {} parameters",
        analytic.len(),
        params.len()
    );
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (lp, _) = f(&probe)?;
        if !lp.is_finite() {
            bail!("loss is not finite at +eps probe of coordinate {}", i);
        }
        probe[i] = params[i] - eps;
        let (lm, _) = f(&probe)?;
        if !lm.is_finite() {
            bail!("loss is not finite at -eps probe of coordinate {}", i);
        }
        probe[i] = params[i];
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng as SeededRng;

    #[test]
    fn cosine_known_values() {
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
        let v = cosine_similarity(&[1.0f64, 1.0], &[1.0, 0.0]);
        assert!((v - 0.70710678).abs() < 1e-7);
    }

    #[test]
    fn cosine_zero_norm_is_flagged_zero() {
        reset_degenerate_cosine_count();
        let before = degenerate_cosine_count();
        let (v, flag) = cosine_similarity_flagged(&[0.0f32, 0.0], &[1.0, 2.0]);
        assert_eq!(v, 0.0);
        assert!(flag);
        assert_eq!(cosine_similarity(&[0.0f32, 0.0], &[1.0, 2.0]), 0.0);
        assert!(degenerate_cosine_count() > before);
    }

    #[test]
    fn hinge_known_values() {
        assert_eq!(hinge(-0.5f32), 0.0);
        assert_eq!(hinge(0.3f32), 0.3);
        assert_eq!(hinge(0.0f32), 0.0);
    }

    #[test]
    fn rng_equal_seeds_equal_streams() {
        let mut a = SeededRng::seed_from(42);
        let mut b = SeededRng::seed_from(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_different_seeds_differ() {
        let mut a = SeededRng::seed_from(1);
        let mut b = SeededRng::seed_from(2);
        let any_diff = (0..1000).any(|_| a.next_u64() != b.next_u64());
        assert!(any_diff);
    }

    #[test]
    fn rng_derive_is_deterministic_and_distinct() {
        let root = SeededRng::seed_from(7);
        let mut a = root.derive(3);
        let mut b = root.derive(3);
        let mut c = root.derive(4);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut a2 = root.derive(3);
        a2.next_u64();
        assert_ne!(a2.next_u64(), c.next_u64());
    }

    #[test]
    fn sample_indices_distinct_and_in_range() {
        let mut rng = SeededRng::seed_from(9);
        let got = rng.sample_indices(20, 8);
        assert_eq!(got.len(), 8);
        let mut sorted = got.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        assert!(got.iter().all(|&i| i < 20));
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |p: &[f64]| {
            let loss = 0.5 * p.iter().map(|v| v * v).sum::<f64>();
            Ok((loss, p.to_vec()))
        };
        let err = grad_check(f, &[0.3, -1.2, 2.5, 0.0], 1e-5).unwrap();
        assert!(err <= 1e-8, "relative error {}", err);
    }

    #[test]
    fn grad_check_constant() {
        let f = |p: &[f64]| Ok((1.5, vec![0.0; p.len()]));
        let err = grad_check(f, &[0.1, 0.9], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_reports_bad_probe() {
        let f = |p: &[f64]| {
            if p[1] > 0.5 {
                Ok((f64::NAN, vec![0.0; p.len()]))
            } else {
                Ok((0.0, vec![0.0; p.len()]))
            }
        };
        let err = grad_check(f, &[0.0, 0.5 - 1e-6], 1e-5).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{}", err);
    }

    #[test]
    fn matmul_small_known() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        let d = a.matmul_nt(&a);
        assert_eq!(d.get(0, 1), 32.0);
        let e = a.matmul_tn(&a);
        assert_eq!(e.get(0, 0), 17.0);
        assert_eq!(e.get(2, 1), 36.0);
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            k in 0.01f64..100.0,
        ) {
            prop_assume!(norm2(&a) > 1e-6 && norm2(&b) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
            let lhs = cosine_similarity(&scaled, &b);
            let rhs = cosine_similarity(&a, &b);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn hinge_idempotent_on_nonnegative(x in -100.0f64..100.0) {
            let h = hinge(x);
            prop_assert!(h >= 0.0);
            prop_assert_eq!(hinge(h), h);
        }
    }
}
