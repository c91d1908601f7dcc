//! Gaussian beliefs, Gaussian densities, and linear-Gaussian state dynamics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{
    check_pd, chol_or_err, spectral_radius, symmetrize, CholFactor, DEFAULT_PD_TOL,
};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A multivariate normal posterior `N(mean, cov)`.
///
/// The covariance is symmetrized and validated as positive definite on
/// construction, so a value of this type is always a usable belief.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(CoreError::DimensionMismatch {
                context: "belief covariance",
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NumericalFailure(
                "belief mean is not finite".into(),
            ));
        }
        let cov = symmetrize(&cov);
        if !check_pd(&cov, DEFAULT_PD_TOL) {
            return Err(CoreError::NotPositiveDefinite {
                what: "belief covariance",
            });
        }
        Ok(Self { mean, cov })
    }

    /// Standard prior `N(0, S)` used to start exact filtering recursions.
    pub fn prior(s: &DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(s.nrows()), s.clone())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Log-density of `N(mean, cov)` evaluated at `x`.
///
/// Computed through a Cholesky factorization; fails if `cov` is not positive
/// definite or dimensions disagree.
pub fn gaussian_log_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(CoreError::DimensionMismatch {
            context: "gaussian_log_density",
            expected: mean.len(),
            got: x.len(),
        });
    }
    let chol = chol_or_err(cov, "density covariance")?;
    Ok(log_density_prefactored(x, mean, &chol))
}

/// Same as [`gaussian_log_density`] but reusing an existing factorization.
pub fn log_density_prefactored(x: &DVector<f64>, mean: &DVector<f64>, chol: &CholFactor) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    -0.5 * (d * LN_2PI + chol.log_det() + chol.mahalanobis_sq(&diff))
}

/// Solves the discrete Lyapunov equation `S = A S A^T + Gamma` for the
/// stationary covariance of `Z_t = A Z_{t-1} + N(0, Gamma)`.
///
/// Fixed-point iteration from `S_0 = Gamma`, stopped when the max-norm change
/// drops below `1e-12`. Requires spectral radius of `A` strictly below one.
pub fn stationary_covariance(a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d || gamma.nrows() != d || gamma.ncols() != d {
        return Err(CoreError::DimensionMismatch {
            context: "stationary_covariance",
            expected: d,
            got: gamma.nrows(),
        });
    }
    let rho = spectral_radius(a);
    if rho.is_nan() || rho >= 1.0 {
        return Err(CoreError::UnstableDynamics {
            spectral_radius: rho,
        });
    }
    let mut s = gamma.clone();
    for _ in 0..200_000 {
        let next = symmetrize(&(a * &s * a.transpose() + gamma));
        let delta = (&next - &s).abs().max();
        s = next;
        if delta < 1e-12 {
            return Ok(s);
        }
    }
    Err(CoreError::NumericalFailure(
        "stationary covariance iteration did not converge".into(),
    ))
}

/// Linear-Gaussian state dynamics `Z_t = A Z_{t-1} + N(0, Gamma)` together
/// with the stationary covariance `S` they induce.
#[derive(Debug, Clone)]
pub struct LinearStateSpec {
    a: DMatrix<f64>,
    gamma: DMatrix<f64>,
    s: DMatrix<f64>,
    s_chol: CholFactor,
    s_inv: DMatrix<f64>,
    gamma_chol: CholFactor,
}

impl LinearStateSpec {
    /// Builds the spec, solving for the stationary covariance.
    pub fn new(a: DMatrix<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        let gamma = symmetrize(&gamma);
        let s = stationary_covariance(&a, &gamma)?;
        Self::assemble(a, gamma, s)
    }

    /// Builds the spec from an explicitly supplied stationary covariance,
    /// validating `S = A S A^T + Gamma` to max-norm `1e-8`.
    pub fn with_stationary(a: DMatrix<f64>, gamma: DMatrix<f64>, s: DMatrix<f64>) -> Result<Self> {
        let rho = spectral_radius(&a);
        if rho.is_nan() || rho >= 1.0 {
            return Err(CoreError::UnstableDynamics {
                spectral_radius: rho,
            });
        }
        let gamma = symmetrize(&gamma);
        let s = symmetrize(&s);
        let residual = (&s - &a * &s * a.transpose() - &gamma).abs().max();
        if residual > 1e-8 {
            return Err(CoreError::InvalidArgument(format!(
                "supplied stationary covariance violates S = A S A^T + Gamma \
                 (residual {residual:.3e})"
            )));
        }
        Self::assemble(a, gamma, s)
    }

    fn assemble(a: DMatrix<f64>, gamma: DMatrix<f64>, s: DMatrix<f64>) -> Result<Self> {
        let gamma_chol = chol_or_err(&gamma, "process noise Gamma")?;
        let s_chol = chol_or_err(&s, "stationary covariance S")?;
        let s_inv = s_chol.inverse();
        Ok(Self {
            a,
            gamma,
            s,
            s_chol,
            s_inv,
            gamma_chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub(crate) fn s_chol(&self) -> &CholFactor {
        &self.s_chol
    }

    pub(crate) fn s_inv(&self) -> &DMatrix<f64> {
        &self.s_inv
    }

    pub(crate) fn gamma_chol(&self) -> &CholFactor {
        &self.gamma_chol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_log_density_at_origin() {
        let x = DVector::from_element(1, 0.0);
        let cov = DMatrix::identity(1, 1);
        let v = gaussian_log_density(&x, &x, &cov).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn log_density_is_symmetric_in_x_and_mean() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let x = DVector::from_row_slice(&[0.4, -1.2]);
        let mu = DVector::from_row_slice(&[-0.7, 0.9]);
        let a = gaussian_log_density(&x, &mu, &cov).unwrap();
        let b = gaussian_log_density(&mu, &x, &cov).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn log_density_integrates_to_one_in_1d() {
        let cov = DMatrix::from_element(1, 1, 0.7);
        let mu = DVector::from_element(1, 0.3);
        let (lo, hi, n) = (-12.0f64, 12.0f64, 40_000usize);
        let dx = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = DVector::from_element(1, lo + (i as f64 + 0.5) * dx);
            total += gaussian_log_density(&x, &mu, &cov).unwrap().exp() * dx;
        }
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn log_density_rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let x = DVector::zeros(2);
        assert!(gaussian_log_density(&x, &x, &cov).is_err());
    }

    #[test]
    fn scalar_lyapunov_solution() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let gamma = DMatrix::from_element(1, 1, 0.75);
        let s = stationary_covariance(&a, &gamma).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lyapunov_round_trip_recovers_identity_at_d10() {
        // A = 0.91 I - 0.1 (every entry), Gamma chosen so that S = I.
        let d = 10;
        let a = DMatrix::from_fn(d, d, |i, j| if i == j { 0.81 } else { -0.1 });
        let gamma = DMatrix::identity(d, d) - &a * a.transpose();
        let s = stationary_covariance(&a, &gamma).unwrap();
        assert!((&s - DMatrix::identity(d, d)).abs().max() < 1e-8);
    }

    #[test]
    fn lyapunov_rejects_unit_root() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let gamma = DMatrix::from_element(1, 1, 1.0);
        match stationary_covariance(&a, &gamma) {
            Err(CoreError::UnstableDynamics { spectral_radius }) => {
                assert!((spectral_radius - 1.0).abs() < 1e-12)
            }
            other => panic!("expected UnstableDynamics, got {other:?}"),
        }
    }

    #[test]
    fn state_spec_validates_supplied_stationary_covariance() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let gamma = DMatrix::from_element(1, 1, 0.75);
        let ok = LinearStateSpec::with_stationary(
            a.clone(),
            gamma.clone(),
            DMatrix::from_element(1, 1, 1.0),
        );
        assert!(ok.is_ok());
        let bad =
            LinearStateSpec::with_stationary(a, gamma, DMatrix::from_element(1, 1, 1.5));
        assert!(bad.is_err());
    }

    #[test]
    fn belief_symmetrizes_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.300000001, 0.3, 1.0]);
        let b = GaussianBelief::new(DVector::zeros(2), cov).unwrap();
        assert_eq!(b.cov()[(0, 1)], b.cov()[(1, 0)]);
    }

    #[test]
    fn belief_rejects_non_pd_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianBelief::new(DVector::zeros(2), cov).is_err());
    }
}
