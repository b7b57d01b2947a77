//! Dense row-major matrices and the few kernels the classifiers are built on.
//!
//! Features are stored as `f32` (the precision embeddings arrive in) while
//! every reduction accumulates in `f64`. Adapter parameters and the training
//! path use `Matrix<f64>` so gradients can be checked against finite
//! differences with enough headroom.

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold under which a row is considered to have no direction.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

/// Storage element of a [`Matrix`].
pub trait Scalar: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn add(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn add(self, other: Self) -> Self {
        self + other
    }
    #[inline]
    fn mul(self, other: Self) -> Self {
        self * other
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn add(self, other: Self) -> Self {
        self + other
    }
    #[inline]
    fn mul(self, other: Self) -> Self {
        self * other
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// How products are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Accumulation {
    /// Accumulate in the storage type.
    Native,
    /// Accumulate in `f64` regardless of storage.
    #[default]
    Wide,
}

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct Matrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    accumulation: Accumulation,
}

/// Equality compares shape and values; the accumulation flag is not data.
impl<T: Scalar> PartialEq for Matrix<T> {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

/// Embedding rows as loaded from disk.
pub type FeatureMatrix = Matrix<f32>;

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data,
            accumulation: Accumulation::default(),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
            accumulation: Accumulation::default(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::from_f64(1.0);
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!("row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn with_accumulation(mut self, accumulation: Accumulation) -> Self {
        self.accumulation = accumulation;
        self
    }

    pub fn accumulation(&self) -> Accumulation {
        self.accumulation
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics, and a 0-column matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out.accumulation = self.accumulation;
        out
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            accumulation: self.accumulation,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
            accumulation: self.accumulation,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, p) in parts.iter().enumerate() {
            if p.cols != cols {
                return Err(Error::shape(format!("vstack part {i}"), cols, p.cols));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Self::new(rows, cols, data)
    }

    fn wide(&self, other: &Self) -> bool {
        self.accumulation == Accumulation::Wide || other.accumulation == Accumulation::Wide
    }

    /// `self × other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}x{} × {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, p);
        out.accumulation = if self.wide(other) {
            Accumulation::Wide
        } else {
            Accumulation::Native
        };
        if self.wide(other) {
            let mut acc = vec![0.0f64; p];
            for i in 0..n {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let a = self.row(i);
                for (k, &aik) in a.iter().enumerate().take(m) {
                    let aik = aik.to_f64();
                    for (slot, &bkj) in acc.iter_mut().zip(other.row(k)) {
                        *slot += aik * bkj.to_f64();
                    }
                }
                for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
                    *o = T::from_f64(*v);
                }
            }
        } else {
            for i in 0..n {
                for k in 0..m {
                    let aik = self.data[i * m + k];
                    let brow = &other.data[k * p..(k + 1) * p];
                    let orow = &mut out.data[i * p..(i + 1) * p];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o = o.add(aik.mul(b));
                    }
                }
            }
        }
        Ok(out)
    }

    /// `self × otherᵀ`, always with wide accumulation.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_transposed",
                format!("equal column counts ({})", self.cols),
                other.cols,
            ));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = T::from_f64(dot(a, other.row(j)));
            }
        }
        Ok(out)
    }

    /// Numerically stable softmax of every row (max-shifted, `f64` sums).
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let mut buf: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
            softmax_in_place(&mut buf);
            for (o, v) in row.iter_mut().zip(buf) {
                *o = T::from_f64(v);
            }
        }
        out
    }

    /// Euclidean norm of every row, accumulated in `f64`.
    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(norm).collect()
    }

    /// Scales every row to unit length. Rows with norm below `eps` are
    /// rejected with the index of the first offending row.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Self> {
        let mut out = self.clone();
        for r in 0..self.rows {
            let n = norm(self.row(r));
            if !n.is_finite() || n < eps {
                return Err(Error::DegenerateEmbedding {
                    context: "matrix".into(),
                    row: r,
                    eps,
                });
            }
            for v in out.row_mut(r) {
                *v = T::from_f64(v.to_f64() / n);
            }
        }
        Ok(out)
    }
}

impl Matrix<f64> {
    /// Scaled-uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn scaled_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Matrix::new(rows, cols, data).expect("length matches by construction")
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y` for a column vector `y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    /// `self += scale · (u ⊗ v)`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = ur * scale;
            if s == 0.0 {
                continue;
            }
            for (o, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *o += s * vc;
            }
        }
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum()
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Max-shifted softmax over a slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Seed for every random stream in the engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// ChaCha8-backed generator; identical seeds yield identical streams.
#[derive(Clone, Debug)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: RngSeed) -> Self {
        SeededRng(ChaCha8Rng::seed_from_u64(seed.0))
    }

    /// Independent stream derived from this seed and a label.
    pub fn derived(seed: RngSeed, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
        rng.set_stream(stream);
        SeededRng(rng)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.0);
    }

    /// `k` distinct indices from `0..n` in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.0, n, k).into_vec()
    }
}

/// Central finite-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Numeric(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while differencing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
