//! Classical Bayesian filters: Kalman variants, the unscented filter, a
//! bootstrap particle filter, and a dense-grid reference for scalar states.
//!
//! All filters share the same shape: a prediction step pushes the posterior
//! through the dynamics, an update step conditions on the new observation.
//! Prediction helpers live here; the update rules live in the submodules.

pub mod grid;
pub mod kalman;
pub mod particle;
pub mod unscented;

pub use grid::{grid_init, grid_step, Grid1d, GridPosterior, GridTransition};
pub use kalman::{ekf_update, iekf_update, kf_update, NonlinearObs};
pub use particle::{systematic_resample, ParticleEnsemble};
pub use unscented::{predict_unscented, ukf_update, UtConfig};

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gaussian::GaussianBelief;
use crate::models::StateModel;

/// Pushes a Gaussian belief through linear dynamics `z' = A z + N(0, Gamma)`.
pub fn predict_linear(
    belief: &GaussianBelief,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let mean = a * belief.mean();
    let cov = a * belief.cov() * a.transpose() + gamma;
    GaussianBelief::new(mean, cov)
}

/// Pushes a Gaussian belief through nonlinear dynamics by linearizing the
/// transition mean at the current estimate.
pub fn predict_linearized(belief: &GaussianBelief, state: &dyn StateModel) -> Result<GaussianBelief> {
    let jac = state.transition_jacobian(belief.mean());
    let mean = state.transition_mean(belief.mean());
    let cov = &jac * belief.cov() * jac.transpose() + state.process_noise();
    GaussianBelief::new(mean, cov)
}

/// Central-difference Jacobian of `f` at `z`, one column per coordinate.
pub fn fd_jacobian(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    z: &DVector<f64>,
    out_dim: usize,
) -> DMatrix<f64> {
    let d = z.len();
    let mut jac = DMatrix::zeros(out_dim, d);
    for j in 0..d {
        let step = 1e-5 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += step;
        zm[j] -= step;
        let col = (f(&zp) - f(&zm)) / (2.0 * step);
        jac.set_column(j, &col);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::LinearStateSpec;

    #[test]
    fn linear_prediction_matches_hand_formula() {
        let belief = GaussianBelief::new(
            DVector::from_row_slice(&[1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
        )
        .unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.2, 0.7]);
        let gamma = DMatrix::identity(2, 2) * 0.3;
        let pred = predict_linear(&belief, &a, &gamma).unwrap();
        let want_mean = &a * belief.mean();
        let want_cov = &a * belief.cov() * a.transpose() + &gamma;
        assert!((pred.mean() - want_mean).abs().max() < 1e-14);
        assert!((pred.cov() - want_cov).abs().max() < 1e-14);
    }

    #[test]
    fn linearized_prediction_reduces_to_linear_case() {
        let spec = LinearStateSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.8, -0.1, 0.05, 0.6]),
            DMatrix::identity(2, 2) * 0.2,
        )
        .unwrap();
        let belief = GaussianBelief::new(
            DVector::from_row_slice(&[0.3, 1.1]),
            DMatrix::identity(2, 2) * 0.7,
        )
        .unwrap();
        let via_linear = predict_linear(&belief, spec.a(), spec.gamma()).unwrap();
        let via_jacobian = predict_linearized(&belief, &spec).unwrap();
        assert!((via_linear.mean() - via_jacobian.mean()).abs().max() < 1e-14);
        assert!((via_linear.cov() - via_jacobian.cov()).abs().max() < 1e-14);
    }

    #[test]
    fn fd_jacobian_recovers_analytic_derivatives() {
        let f = |z: &DVector<f64>| {
            DVector::from_row_slice(&[z[0].sin() + z[1], z[0] * z[1], 3.0 * z[1]])
        };
        let z = DVector::from_row_slice(&[0.7, -1.2]);
        let jac = fd_jacobian(&f, &z, 3);
        let want = DMatrix::from_row_slice(3, 2, &[z[0].cos(), 1.0, z[1], z[0], 0.0, 3.0]);
        assert!((jac - want).abs().max() < 1e-8);
    }
}
