//! Kalman, extended, and iterated extended observation updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::gaussian::GaussianBelief;
use crate::linalg::{chol_or_err, symmetrize};
use crate::models::LinearGaussianObs;

/// A differentiable observation map with additive Gaussian noise, packaged
/// for the linearizing filters.
pub struct NonlinearObs<'a> {
    pub h: &'a dyn Fn(&DVector<f64>) -> DVector<f64>,
    pub jacobian: &'a dyn Fn(&DVector<f64>) -> DMatrix<f64>,
    pub lambda: &'a DMatrix<f64>,
}

/// Exact Kalman observation update for `x = H z + b + N(0, Lambda)`.
pub fn kf_update(
    pred: &GaussianBelief,
    obs: &LinearGaussianObs,
    x: &DVector<f64>,
) -> Result<GaussianBelief> {
    let h = obs.h();
    let h_cov = h * pred.cov();
    let innov_cov = symmetrize(&(&h_cov * h.transpose() + obs.lambda()));
    let innov_chol = chol_or_err(&innov_cov, "innovation covariance")?;
    // K = Phi H^T S^{-1}, computed as (S^{-1} H Phi)^T.
    let gain = innov_chol.solve_mat(&h_cov).transpose();
    let mean = pred.mean() + &gain * (x - obs.mean(pred.mean()));
    let cov = symmetrize(&(pred.cov() - &gain * &h_cov));
    GaussianBelief::new(mean, cov)
}

/// Extended Kalman update: linearize at the predicted mean, update once.
pub fn ekf_update(
    pred: &GaussianBelief,
    obs: &NonlinearObs,
    x: &DVector<f64>,
) -> Result<GaussianBelief> {
    iekf_update(pred, obs, x, 1)
}

/// Iterated extended Kalman update: relinearize at the running estimate
/// until it stops moving. This is Gauss-Newton on the posterior mode, so on
/// convergence the mean is the maximum a posteriori state.
///
/// An iterate whose norm explodes aborts with a divergence error carrying
/// the last stable belief, so callers can keep filtering if they choose.
pub fn iekf_update(
    pred: &GaussianBelief,
    obs: &NonlinearObs,
    x: &DVector<f64>,
    max_iters: usize,
) -> Result<GaussianBelief> {
    if max_iters == 0 {
        return Err(CoreError::InvalidArgument(
            "iterated update needs at least one iteration".into(),
        ));
    }
    let mut center = pred.mean().clone();
    let mut result: Option<GaussianBelief> = None;
    for iteration in 0..max_iters {
        let jac = (obs.jacobian)(&center);
        let h_cov = &jac * pred.cov();
        let innov_cov = symmetrize(&(&h_cov * jac.transpose() + obs.lambda));
        let innov_chol = chol_or_err(&innov_cov, "innovation covariance")?;
        let gain = innov_chol.solve_mat(&h_cov).transpose();
        let residual = x - (obs.h)(&center) - &jac * (pred.mean() - &center);
        let mean = pred.mean() + &gain * residual;
        if mean.norm() > 1e8 {
            return Err(CoreError::Divergence {
                iterations: iteration + 1,
                magnitude: mean.norm(),
                last_stable: result.map(Box::new),
            });
        }
        let shift = (&mean - &center).norm();
        let cov = symmetrize(&(pred.cov() - &gain * &h_cov));
        center = mean.clone();
        result = Some(GaussianBelief::new(mean, cov)?);
        if shift < 1e-10 * (1.0 + center.norm()) {
            break;
        }
    }
    Ok(result.expect("at least one iteration ran"))
}
