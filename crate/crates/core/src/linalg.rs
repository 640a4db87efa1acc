//! Dense vector and matrix primitives, Cholesky factorization and
//! multivariate Gaussian sampling.
//!
//! Storage is row-major `f64`. Nothing here tries to be a BLAS; the sizes the
//! engine works with (feature widths in the tens to hundreds) keep the naive
//! loops adequate.

use std::ops::Deref;

use crate::error::{Error, Result};
pub use crate::rng::{gaussian_scalar, RngState};

/// Relative tolerance for the symmetry precondition of [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Jitter escalation schedule, as multiples of `trace / d`.
pub const JITTER_SCHEDULE: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    /// Wraps values that are finite by construction.
    pub(crate) fn from_vec(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Symmetric within `rel_tol` of the largest absolute entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let tol = rel_tol * self.max_abs().max(f64::MIN_POSITIVE);
        (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn is_lower_triangular(&self) -> bool {
        self.is_square() && (0..self.rows).all(|i| (i + 1..self.cols).all(|j| self.get(i, j) == 0.0))
    }
}

/// Cholesky factor `L` (lower triangular) with `L Lᵀ = m + jitter·I`.
pub fn cholesky(m: &Matrix, jitter: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows,
            cols: m.cols,
        });
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::NotSymmetric);
    }
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = m.get(j, j) + jitter - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(pivot.is_finite() && pivot > 0.0) {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        pivot = pivot.sqrt();
        l.set(j, j, pivot);
        for i in j + 1..n {
            let s = m.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, s / pivot);
        }
    }
    Ok(l)
}

/// Factors a covariance matrix for sampling, escalating the diagonal jitter
/// from `1e-6 · trace/d` by factors of ten up to `1e-2 · trace/d`.
///
/// Returns the factor and the jitter that succeeded. An exactly zero matrix
/// factors to the zero matrix with no jitter.
pub fn factor_covariance(cov: &Matrix) -> Result<(Matrix, f64)> {
    if !cov.is_square() {
        return Err(Error::NotSquare {
            rows: cov.rows,
            cols: cov.cols,
        });
    }
    if cov.data.iter().all(|&v| v == 0.0) {
        return Ok((Matrix::zeros(cov.rows, cov.cols), 0.0));
    }
    let scale = cov.trace() / cov.rows as f64;
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    let mut last = Error::NotPositiveDefinite { jitter: 0.0 };
    for factor in JITTER_SCHEDULE {
        match cholesky(cov, factor * scale) {
            Ok(l) => return Ok((l, factor * scale)),
            Err(e @ Error::NotPositiveDefinite { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Draws `count` samples `mean + L·z` with `z ~ N(0, I)`.
///
/// The `z` draws are consumed sample by sample, coordinate by coordinate, so
/// the same `rng` state always yields the same output.
pub fn sample_mvn(mean: &[f64], chol_cov: &Matrix, count: usize, rng: &mut RngState) -> Result<Vec<Vector>> {
    let d = mean.len();
    if chol_cov.rows != d || chol_cov.cols != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: chol_cov.rows,
        });
    }
    if !chol_cov.is_lower_triangular() {
        return Err(Error::InvalidConfig(
            "covariance factor must be lower-triangular".into(),
        ));
    }
    let mut z = vec![0.0; d];
    let samples = (0..count)
        .map(|_| {
            for zi in z.iter_mut() {
                *zi = rng.gaussian();
            }
            let x = (0..d)
                .map(|i| mean[i] + dot(&chol_cov.row(i)[..=i], &z[..=i]))
                .collect();
            Vector::from_vec(x)
        })
        .collect();
    Ok(samples)
}
