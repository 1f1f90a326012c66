//! Dense linear-algebra kernels and statistical estimators.
//!
//! All metric evaluation runs through this module at 64-bit precision.
//! Symmetric positive-definite (SPD) matrices are factored once with
//! Cholesky and reused for determinants and solves; explicit inverses are
//! never formed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when checking symmetry of Cholesky inputs.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Errors from the numeric kernels.
#[derive(Debug, Error)]
pub enum NumericsError {
    /// A pivot of the Cholesky factorization was non-positive. Callers
    /// fitting covariances should increase the regularization scale.
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: &'static str,
    },
    #[error("matrix is not symmetric within tolerance at ({row},{col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major matrix of `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self * other`, row-major ikj loop.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_symmetric(&self) -> Result<()> {
        let scale = self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let tol = SYMMETRY_TOL * scale.max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return Err(NumericsError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense `f64` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Mean vector and regularized covariance of a local-feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vector,
    pub sigma: Matrix,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// Lower-triangular Cholesky factor `L` with `L * L^T == m`.
///
/// The input must be square and symmetric to tolerance. A non-positive
/// pivot reports `NotPositiveDefinite`; callers fitting covariances should
/// raise their regularization.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(NumericsError::DimensionMismatch {
            expected: m.rows(),
            found: m.cols(),
            context: "cholesky requires a square matrix",
        });
    }
    m.check_symmetric()?;
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(NumericsError::NotPositiveDefinite { pivot: i });
                }
                l[(i, j)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Log-determinant of an SPD matrix via its Cholesky factor.
pub fn log_det_spd(m: &Matrix) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(log_det_from_factor(&l))
}

/// `2 * sum ln L_ii` for a lower-triangular Cholesky factor `L`.
pub fn log_det_from_factor(l: &Matrix) -> f64 {
    2.0 * (0..l.rows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Solves `m * x = b` for SPD `m` using two triangular solves.
pub fn spd_solve(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    let l = cholesky(m)?;
    Ok(solve_with_factor(&l, b))
}

/// Solves `(L L^T) x = b` given the lower-triangular factor `L`.
pub fn solve_with_factor(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    assert_eq!(b.rows(), n, "solve rhs row mismatch");
    let cols = b.cols();
    // Forward substitution: L y = b.
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            for c in 0..cols {
                let t = lik * y[(k, c)];
                y[(i, c)] -= t;
            }
        }
        let d = l[(i, i)];
        for c in 0..cols {
            y[(i, c)] /= d;
        }
    }
    // Back substitution: L^T x = y.
    let mut x = y;
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki == 0.0 {
                continue;
            }
            for c in 0..cols {
                let t = lki * x[(k, c)];
                x[(i, c)] -= t;
            }
        }
        let d = l[(i, i)];
        for c in 0..cols {
            x[(i, c)] /= d;
        }
    }
    x
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with `m = V diag(w) V^T`; columns
/// of `V` are the eigenvectors. Adequate for the matrix sizes used here
/// (covariances up to a few hundred rows).
pub fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !m.is_square() {
        return Err(NumericsError::DimensionMismatch {
            expected: m.rows(),
            found: m.cols(),
            context: "sym_eigen requires a square matrix",
        });
    }
    m.check_symmetric()?;
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-14 * a.frobenius_norm().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w = (0..n).map(|i| a[(i, i)]).collect();
    Ok((w, v))
}

/// Principal square root of an SPD matrix via symmetric eigendecomposition.
pub fn spd_sqrt(m: &Matrix) -> Result<Matrix> {
    // Cholesky doubles as the SPD check.
    cholesky(m)?;
    let (w, v) = sym_eigen(m)?;
    let n = m.rows();
    for (i, &wi) in w.iter().enumerate() {
        if wi <= 0.0 {
            return Err(NumericsError::NotPositiveDefinite { pivot: i });
        }
    }
    // V diag(sqrt w) V^T
    let mut scaled = v.clone();
    for j in 0..n {
        let s = w[j].sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    let out = scaled.matmul(&v.transpose());
    // Symmetrize to remove rotation round-off.
    let mut sym = out.clone();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = 0.5 * (out[(i, j)] + out[(j, i)]);
        }
    }
    Ok(sym)
}

/// Floor applied to the mean-eigenvalue scale of the covariance shrinkage.
pub const COVARIANCE_EPS_FLOOR: f64 = 1e-8;

/// Fits a Gaussian to a set of feature vectors.
///
/// Uses the maximum-likelihood covariance (divide by the sample count) plus
/// shrinkage `eps * I` with `eps = epsilon_scale * max(trace/dim, floor)`,
/// which keeps the estimate positive definite even when the sample count is
/// below the feature dimension.
pub fn fit_gaussian(samples: &[Vector], epsilon_scale: f64) -> Result<GaussianStats> {
    assert!(
        !samples.is_empty(),
        "fit_gaussian needs at least one sample"
    );
    assert!(epsilon_scale > 0.0, "epsilon_scale must be positive");
    let dim = samples[0].dim();
    for s in samples.iter() {
        if s.dim() != dim {
            return Err(NumericsError::DimensionMismatch {
                expected: dim,
                found: s.dim(),
                context: "fit_gaussian sample dims",
            });
        }
    }
    let m = samples.len() as f64;
    let mut mu = Vector::zeros(dim);
    for s in samples {
        for (acc, &v) in mu.data_mut().iter_mut().zip(s.data()) {
            *acc += v;
        }
    }
    for v in mu.data_mut() {
        *v /= m;
    }
    let mut sigma = Matrix::zeros(dim, dim);
    for s in samples {
        let d: Vec<f64> = s.data().iter().zip(mu.data()).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            let di = d[i];
            if di == 0.0 {
                continue;
            }
            let row = sigma.row_mut(i);
            for (j, &dj) in d.iter().enumerate() {
                row[j] += di * dj;
            }
        }
    }
    for v in sigma.data_mut() {
        *v /= m;
    }
    let eps = epsilon_scale * (sigma.trace() / dim as f64).max(COVARIANCE_EPS_FLOOR);
    for i in 0..dim {
        sigma[(i, i)] += eps;
    }
    if !mu.all_finite() || !sigma.all_finite() {
        return Err(NumericsError::NonFinite {
            context: "fit_gaussian",
        });
    }
    Ok(GaussianStats { mu, sigma })
}
