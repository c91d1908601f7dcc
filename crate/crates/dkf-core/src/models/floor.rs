//! Nonlinear benchmark model: oscillatory state dynamics observed through
//! banks of floor functions.
//!
//! The state evolves as `z_t = A (sin(z_{t-1}) + z_{t-1}) + N(0, Gamma)` with
//! `sin` applied componentwise. Each observation stacks, for a list of offset
//! vectors `a_j`, the componentwise `floor(z - a_j)` plus a shared `z / 3`
//! ramp, then adds Gaussian noise. The floor steps carry most of the signal
//! yet have zero derivative almost everywhere, which is what makes this model
//! hostile to linearization-based filters.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{CoreError, Result};
use crate::gaussian::log_density_prefactored;
use crate::linalg::{chol_or_err, symmetrize, CholFactor};

use super::{sample_gaussian, ObservationModel, StateModel};

#[derive(Debug, Clone)]
pub struct FloorStateModel {
    a: DMatrix<f64>,
    gamma: DMatrix<f64>,
    gamma_chol: CholFactor,
    burn_in: usize,
}

impl FloorStateModel {
    pub fn new(a: DMatrix<f64>, gamma: DMatrix<f64>, burn_in: usize) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(CoreError::DimensionMismatch {
                context: "state map must be square",
                expected: d,
                got: a.ncols(),
            });
        }
        if gamma.nrows() != d || gamma.ncols() != d {
            return Err(CoreError::DimensionMismatch {
                context: "process noise covariance",
                expected: d,
                got: gamma.nrows(),
            });
        }
        let gamma = symmetrize(&gamma);
        let gamma_chol = chol_or_err(&gamma, "process noise covariance")?;
        Ok(Self {
            a,
            gamma,
            gamma_chol,
            burn_in,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl StateModel for FloorStateModel {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn transition_mean(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a * (z.map(f64::sin) + z)
    }

    fn transition_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let scale = z.map(|v| v.cos() + 1.0);
        let mut jac = self.a.clone();
        for (j, s) in scale.iter().enumerate() {
            jac.column_mut(j).scale_mut(*s);
        }
        jac
    }

    fn process_noise(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// No closed-form stationary law exists, so the initial state is drawn by
    /// burning in the chain from the origin.
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        for _ in 0..self.burn_in {
            z = self.sample_transition(&z, rng);
        }
        z
    }

    fn sample_transition(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        sample_gaussian(&self.transition_mean(z), &self.gamma_chol, rng)
    }
}

#[derive(Debug, Clone)]
pub struct FloorObsModel {
    offsets: Vec<DVector<f64>>,
    lambda: DMatrix<f64>,
    lambda_chol: CholFactor,
}

impl FloorObsModel {
    pub fn new(offsets: Vec<DVector<f64>>, lambda: DMatrix<f64>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(CoreError::InvalidArgument(
                "floor observation needs at least one offset".into(),
            ));
        }
        let d = offsets[0].len();
        if offsets.iter().any(|a| a.len() != d) {
            return Err(CoreError::InvalidArgument(
                "all offsets must share the state dimension".into(),
            ));
        }
        let m = d * offsets.len();
        if lambda.nrows() != m || lambda.ncols() != m {
            return Err(CoreError::DimensionMismatch {
                context: "floor observation noise covariance",
                expected: m,
                got: lambda.nrows(),
            });
        }
        let lambda = symmetrize(&lambda);
        let lambda_chol = chol_or_err(&lambda, "floor observation noise covariance")?;
        Ok(Self {
            offsets,
            lambda,
            lambda_chol,
        })
    }

    /// Offsets with every coordinate equal, spaced evenly over `[lo, hi]`.
    pub fn evenly_spaced(
        state_dim: usize,
        per_coord: usize,
        lo: f64,
        hi: f64,
        lambda: DMatrix<f64>,
    ) -> Result<Self> {
        if per_coord < 2 {
            return Err(CoreError::InvalidArgument(
                "need at least two offsets per coordinate".into(),
            ));
        }
        let offsets = (0..per_coord)
            .map(|j| {
                let o = lo + (hi - lo) * j as f64 / (per_coord - 1) as f64;
                DVector::from_element(state_dim, o)
            })
            .collect();
        Self::new(offsets, lambda)
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// The pure floor stack `h(z)`, without the ramp or noise.
    pub fn floor_stack(&self, z: &DVector<f64>) -> DVector<f64> {
        let d = self.state_dim();
        let mut out = DVector::zeros(self.obs_dim());
        for (j, a) in self.offsets.iter().enumerate() {
            for k in 0..d {
                out[j * d + k] = (z[k] - a[k]).floor();
            }
        }
        out
    }

    /// Noise-free observation mean `h(z) + z/3` (ramp broadcast per block).
    pub fn mean_obs(&self, z: &DVector<f64>) -> DVector<f64> {
        let d = self.state_dim();
        let mut out = self.floor_stack(z);
        for j in 0..self.offsets.len() {
            for k in 0..d {
                out[j * d + k] += z[k] / 3.0;
            }
        }
        out
    }

    /// The almost-everywhere derivative of the observation mean: the floor
    /// steps contribute nothing, leaving only the ramp.
    pub fn ae_jacobian(&self) -> DMatrix<f64> {
        let d = self.state_dim();
        let mut jac = DMatrix::zeros(self.obs_dim(), d);
        for j in 0..self.offsets.len() {
            for k in 0..d {
                jac[(j * d + k, k)] = 1.0 / 3.0;
            }
        }
        jac
    }
}

impl ObservationModel for FloorObsModel {
    fn state_dim(&self) -> usize {
        self.offsets[0].len()
    }

    fn obs_dim(&self) -> usize {
        self.state_dim() * self.offsets.len()
    }

    fn sample(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        sample_gaussian(&self.mean_obs(z), &self.lambda_chol, rng)
    }

    fn log_likelihood(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        log_density_prefactored(x, &self.mean_obs(z), &self.lambda_chol)
    }
}
