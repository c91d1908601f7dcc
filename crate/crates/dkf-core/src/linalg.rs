//! Dense linear-algebra helpers shared across the crate.
//!
//! Everything here works on `nalgebra` dynamic matrices. The central
//! primitive is a Cholesky factorization with an explicit relative pivot
//! threshold; positive-definiteness checks elsewhere in the crate are defined
//! as "this factorization succeeds".

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

/// Relative pivot threshold used by [`check_pd`] and covariance validation:
/// a pivot must exceed `DEFAULT_PD_TOL` times the largest diagonal entry.
pub const DEFAULT_PD_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `L L^T = M`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
}

impl CholFactor {
    /// Factors a symmetric matrix, failing if any pivot falls at or below
    /// `rel_tol` times the largest diagonal entry of the input.
    pub fn new(m: &DMatrix<f64>, rel_tol: f64) -> Option<Self> {
        let n = m.nrows();
        if n == 0 || m.ncols() != n {
            return None;
        }
        let mut max_diag: f64 = 0.0;
        for i in 0..n {
            let d = m[(i, i)];
            if !d.is_finite() {
                return None;
            }
            max_diag = max_diag.max(d.abs());
        }
        let threshold = rel_tol * max_diag.max(f64::MIN_POSITIVE);
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !d.is_finite() || d <= threshold {
                return None;
            }
            let root = d.sqrt();
            l[(j, j)] = root;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if !s.is_finite() {
                    return None;
                }
                l[(i, j)] = s / root;
            }
        }
        Some(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `L y = b` in place.
    pub fn forward_solve(&self, b: &mut DVector<f64>) {
        let n = self.dim();
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= self.l[(i, k)] * b[k];
            }
            b[i] = v / self.l[(i, i)];
        }
    }

    /// Solves `M x = b` via the two triangular systems.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        self.forward_solve(&mut x);
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in (i + 1)..n {
                v -= self.l[(k, i)] * x[k];
            }
            x[i] = v / self.l[(i, i)];
        }
        x
    }

    /// Solves `M X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve_vec(&DVector::from_column_slice(b.column(j).as_slice()));
            out.set_column(j, &col);
        }
        out
    }

    /// Returns `M^{-1}`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let inv = self.solve_mat(&DMatrix::identity(n, n));
        symmetrize(&inv)
    }

    /// `log det M` (twice the log-trace of the factor diagonal).
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Squared Mahalanobis norm `b^T M^{-1} b` through one triangular solve.
    pub fn mahalanobis_sq(&self, b: &DVector<f64>) -> f64 {
        let mut y = b.clone();
        self.forward_solve(&mut y);
        y.norm_squared()
    }
}

/// Replaces a nearly-symmetric matrix by `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows().min(m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Tests whether a matrix is symmetric positive definite.
///
/// The matrix must be square and symmetric to relative precision `1e-8`;
/// positive definiteness is then decided by a Cholesky factorization whose
/// pivots must exceed `rel_tol` times the largest diagonal entry.
pub fn check_pd(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !scale.is_finite() {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale.max(1.0) {
                return false;
            }
        }
    }
    CholFactor::new(m, rel_tol).is_some()
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, ev| acc.max(ev.norm()))
}

/// Factors a covariance, mapping failure to a named error.
pub fn chol_or_err(m: &DMatrix<f64>, what: &'static str) -> Result<CholFactor> {
    CholFactor::new(m, DEFAULT_PD_TOL).ok_or(CoreError::NotPositiveDefinite { what })
}

/// `log(sum(exp(v)))` guarded against overflow; `-inf` when all entries are.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
