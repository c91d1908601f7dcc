//! Linear-Gaussian observations `x = H z + b + N(0, Lambda)`.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{CoreError, Result};
use crate::gaussian::log_density_prefactored;
use crate::linalg::{chol_or_err, symmetrize, CholFactor};

use super::{sample_gaussian, ObservationModel};

#[derive(Debug, Clone)]
pub struct LinearGaussianObs {
    h: DMatrix<f64>,
    b: DVector<f64>,
    lambda: DMatrix<f64>,
    lambda_chol: CholFactor,
}

impl LinearGaussianObs {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        if b.len() != h.nrows() {
            return Err(CoreError::DimensionMismatch {
                context: "linear observation bias",
                expected: h.nrows(),
                got: b.len(),
            });
        }
        if lambda.nrows() != h.nrows() || lambda.ncols() != h.nrows() {
            return Err(CoreError::DimensionMismatch {
                context: "linear observation noise covariance",
                expected: h.nrows(),
                got: lambda.nrows(),
            });
        }
        let lambda = symmetrize(&lambda);
        let lambda_chol = chol_or_err(&lambda, "observation noise covariance")?;
        Ok(Self {
            h,
            b,
            lambda,
            lambda_chol,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn mean(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.h * z + &self.b
    }
}

impl ObservationModel for LinearGaussianObs {
    fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn sample(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        sample_gaussian(&self.mean(z), &self.lambda_chol, rng)
    }

    fn log_likelihood(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        log_density_prefactored(x, &self.mean(z), &self.lambda_chol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::gaussian_log_density;

    #[test]
    fn log_likelihood_matches_direct_density() {
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, -0.3, 2.0, 1.0]);
        let b = DVector::from_row_slice(&[0.1, -0.2]);
        let lambda = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let obs = LinearGaussianObs::new(h.clone(), b.clone(), lambda.clone()).unwrap();
        let z = DVector::from_row_slice(&[0.3, -1.1, 0.7]);
        let x = DVector::from_row_slice(&[0.9, 0.2]);
        let expected = gaussian_log_density(&x, &(h * &z + b), &lambda).unwrap();
        assert!((obs.log_likelihood(&x, &z) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_noise_shape() {
        let err = LinearGaussianObs::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(3, 3),
        );
        assert!(err.is_err());
    }
}
