//! Unscented transform prediction and observation updates.
//!
//! Sigma points are spread `alpha * sqrt(d)` along the Cholesky axes of the
//! current covariance. Means are accumulated relative to the center point, so
//! the huge negative center weight that small `alpha` implies never meets a
//! large intermediate sum.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::gaussian::GaussianBelief;
use crate::linalg::{chol_or_err, symmetrize, CholFactor};
use crate::models::StateModel;

#[derive(Debug, Clone, Copy)]
pub struct UtConfig {
    /// Sigma-point spread; small values probe an almost infinitesimal
    /// neighborhood of the mean.
    pub alpha: f64,
    /// Center-point covariance correction; 2 is exact for Gaussian priors.
    pub beta: f64,
}

impl Default for UtConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
        }
    }
}

struct SigmaSet {
    /// Center point followed by the `2d` symmetric points.
    points: Vec<DVector<f64>>,
    w_cov0: f64,
    w_rest: f64,
}

fn sigma_points(belief: &GaussianBelief, cfg: &UtConfig) -> Result<SigmaSet> {
    if cfg.alpha <= 0.0 {
        return Err(CoreError::InvalidArgument(
            "sigma-point spread must be positive".into(),
        ));
    }
    let d = belief.dim();
    let chol = chol_or_err(belief.cov(), "sigma-point covariance")?;
    let scale = cfg.alpha * (d as f64).sqrt();
    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(belief.mean().clone());
    for i in 0..d {
        let axis = chol.lower().column(i) * scale;
        points.push(belief.mean() + &axis);
        points.push(belief.mean() - &axis);
    }
    let a2 = cfg.alpha * cfg.alpha;
    Ok(SigmaSet {
        points,
        w_cov0: 2.0 - 1.0 / a2 - a2 + cfg.beta,
        w_rest: 1.0 / (2.0 * d as f64 * a2),
    })
}

/// Propagates the sigma set through `map` and returns the transformed mean
/// plus per-point deviations (center first).
fn transform(
    sigma: &SigmaSet,
    map: &dyn Fn(&DVector<f64>) -> DVector<f64>,
) -> (DVector<f64>, Vec<DVector<f64>>) {
    let images: Vec<DVector<f64>> = sigma.points.iter().map(map).collect();
    let center = &images[0];
    let mut mean = center.clone();
    for img in &images[1..] {
        mean += (img - center) * sigma.w_rest;
    }
    let devs = images.iter().map(|img| img - &mean).collect();
    (mean, devs)
}

fn weighted_outer(sigma: &SigmaSet, devs: &[DVector<f64>]) -> DMatrix<f64> {
    let dim = devs[0].len();
    let mut cov = &devs[0] * devs[0].transpose() * sigma.w_cov0;
    let mut rest = DMatrix::zeros(dim, dim);
    for dev in &devs[1..] {
        rest += dev * dev.transpose();
    }
    cov += rest * sigma.w_rest;
    cov
}

/// Unscented prediction through the state model's transition mean.
pub fn predict_unscented(
    belief: &GaussianBelief,
    state: &dyn StateModel,
    cfg: &UtConfig,
) -> Result<GaussianBelief> {
    let sigma = sigma_points(belief, cfg)?;
    let map = |z: &DVector<f64>| state.transition_mean(z);
    let (mean, devs) = transform(&sigma, &map);
    let cov = symmetrize(&(weighted_outer(&sigma, &devs) + state.process_noise()));
    GaussianBelief::new(mean, cov)
}

/// Factors the innovation covariance, growing the diagonal in relative
/// steps if plain Cholesky fails.
///
/// With a tiny spread the center weight is order `-1/alpha^2`, so the
/// accumulated covariance cancels terms a million times its result; when the
/// observation map has jumps, some diagonal entries are huge and the
/// cancellation error can push small eigenvalues below zero. Slack
/// proportional to each entry's own diagonal restores definiteness exactly
/// in the directions that carry the error, without disturbing well-scaled
/// channels.
fn chol_with_diagonal_slack(mat: &DMatrix<f64>) -> Result<CholFactor> {
    for eps in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] *= 1.0 + eps;
        }
        if let Some(chol) = CholFactor::new(&m, 1e-14) {
            return Ok(chol);
        }
    }
    Err(CoreError::NotPositiveDefinite {
        what: "unscented innovation covariance",
    })
}

/// Unscented observation update for `x = h(z) + N(0, lambda)`.
pub fn ukf_update(
    pred: &GaussianBelief,
    h: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    lambda: &DMatrix<f64>,
    x: &DVector<f64>,
    cfg: &UtConfig,
) -> Result<GaussianBelief> {
    let sigma = sigma_points(pred, cfg)?;
    let (obs_mean, devs) = transform(&sigma, &h);
    let obs_cov = symmetrize(&(weighted_outer(&sigma, &devs) + lambda));
    let obs_chol = chol_with_diagonal_slack(&obs_cov)?;
    let d = pred.dim();
    let mut cross = DMatrix::zeros(d, x.len());
    // The center point sits on the mean, so only the symmetric points
    // contribute to the state/observation cross covariance.
    for (point, dev) in sigma.points[1..].iter().zip(&devs[1..]) {
        cross += (point - pred.mean()) * dev.transpose() * sigma.w_rest;
    }
    let gain = obs_chol.solve_mat(&cross.transpose()).transpose();
    let mean = pred.mean() + &gain * (x - &obs_mean);
    let cov = symmetrize(&(pred.cov() - &gain * &obs_cov * gain.transpose()));
    GaussianBelief::new(mean, cov)
}
