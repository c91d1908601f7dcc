//! Nadaraya-Watson kernel regression and residual covariance smoothing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{mean_state_variance, median_pairwise_distance, SupervisedSet};
use crate::error::{CoreError, Result};
use crate::linalg::symmetrize;

/// Kernel-weighted averaging of training labels with a Gaussian kernel of
/// one shared bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NwModel {
    bandwidth: f64,
    xs: DMatrix<f64>,
    zs: DMatrix<f64>,
}

/// Twenty log-spaced bandwidths spanning 1e-2 to 1e2 times the median
/// pairwise distance of the observations.
pub fn default_bandwidth_grid(data: &SupervisedSet) -> Vec<f64> {
    let scale = median_pairwise_distance(data.xs());
    let count = 20;
    (0..count)
        .map(|k| {
            let t = k as f64 / (count - 1) as f64;
            scale * 10f64.powf(-2.0 + 4.0 * t)
        })
        .collect()
}

/// Exact leave-one-out mean squared error of the predictor at one
/// bandwidth, given precomputed squared distances.
fn loo_mse(dist_sq: &DMatrix<f64>, zs: &DMatrix<f64>, bandwidth: f64) -> f64 {
    let m = zs.nrows();
    let d = zs.ncols();
    let inv2 = 0.5 / (bandwidth * bandwidth);
    let mut total = 0.0;
    let mut acc = vec![0.0; d];
    for i in 0..m {
        let mut peak = f64::NEG_INFINITY;
        for j in 0..m {
            if j != i {
                peak = peak.max(-dist_sq[(i, j)] * inv2);
            }
        }
        acc.fill(0.0);
        let mut wsum = 0.0;
        for j in 0..m {
            if j == i {
                continue;
            }
            let w = (-dist_sq[(i, j)] * inv2 - peak).exp();
            if w > 0.0 {
                wsum += w;
                for (k, slot) in acc.iter_mut().enumerate() {
                    *slot += w * zs[(j, k)];
                }
            }
        }
        for (k, slot) in acc.iter().enumerate() {
            let err = slot / wsum - zs[(i, k)];
            total += err * err;
        }
    }
    total / m as f64
}

fn pairwise_sq_distances(xs: &DMatrix<f64>) -> DMatrix<f64> {
    let m = xs.nrows();
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let d2 = (xs.row(i) - xs.row(j)).norm_squared();
            out[(i, j)] = d2;
            out[(j, i)] = d2;
        }
    }
    out
}

/// Selects the grid bandwidth with the smallest exact leave-one-out MSE,
/// breaking ties toward the larger (smoother) bandwidth.
pub fn nw_fit(data: &SupervisedSet, bandwidth_grid: &[f64]) -> Result<NwModel> {
    if data.len() < 2 {
        return Err(CoreError::InsufficientData {
            needed: 2,
            got: data.len(),
        });
    }
    if bandwidth_grid.is_empty() {
        return Err(CoreError::InvalidArgument(
            "bandwidth grid must not be empty".into(),
        ));
    }
    let mut grid = bandwidth_grid.to_vec();
    for &h in &grid {
        if !(h > 0.0 && h.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "bandwidths must be positive and finite, got {h}"
            )));
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite bandwidths"));
    let dist_sq = pairwise_sq_distances(data.xs());
    let mut best = grid[0];
    let mut best_mse = f64::INFINITY;
    for &h in &grid {
        let mse = loo_mse(&dist_sq, data.zs(), h);
        if mse <= best_mse {
            best_mse = mse;
            best = h;
        }
    }
    NwModel::with_bandwidth(data, best)
}

impl NwModel {
    /// Builds the predictor at a fixed bandwidth without selection.
    pub fn with_bandwidth(data: &SupervisedSet, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self {
            bandwidth,
            xs: data.xs().clone(),
            zs: data.zs().clone(),
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.nrows() == 0
    }

    /// Kernel-weighted label average in log space. The flag is true only if
    /// every weight degenerated (possible with non-finite queries); the
    /// output then falls back to the nearest training label.
    pub fn predict_detailed(&self, x: &DVector<f64>) -> (DVector<f64>, bool) {
        let m = self.xs.nrows();
        let n = self.xs.ncols();
        let d = self.zs.ncols();
        let inv2 = 0.5 / (self.bandwidth * self.bandwidth);
        let mut logs = vec![0.0; m];
        let mut peak = f64::NEG_INFINITY;
        let mut nearest = 0;
        let mut nearest_d2 = f64::INFINITY;
        for (i, slot) in logs.iter_mut().enumerate() {
            let mut d2 = 0.0;
            for j in 0..n {
                let diff = x[j] - self.xs[(i, j)];
                d2 += diff * diff;
            }
            if d2 < nearest_d2 {
                nearest_d2 = d2;
                nearest = i;
            }
            *slot = -d2 * inv2;
            peak = peak.max(*slot);
        }
        let mut wsum = 0.0;
        let mut acc = DVector::zeros(d);
        for (i, lw) in logs.iter().enumerate() {
            let w = (lw - peak).exp();
            if w > 0.0 {
                wsum += w;
                for k in 0..d {
                    acc[k] += w * self.zs[(i, k)];
                }
            }
        }
        if !(wsum.is_finite() && wsum > 0.0) {
            return (self.zs.row(nearest).transpose(), true);
        }
        (acc / wsum, false)
    }

    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        self.predict_detailed(x).0
    }
}

/// A map from observations to symmetric positive definite state
/// covariances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum QModel {
    /// Kernel-smoothed residual outer products plus a ridge.
    Smoothed {
        outer: NwModel,
        state_dim: usize,
        ridge: f64,
    },
    /// One covariance for every observation.
    Constant(DMatrix<f64>),
}

impl QModel {
    pub fn constant(q: DMatrix<f64>) -> Result<Self> {
        let q = symmetrize(&q);
        if !crate::linalg::check_pd(&q, crate::linalg::DEFAULT_PD_TOL) {
            return Err(CoreError::NotPositiveDefinite {
                what: "constant conditional covariance",
            });
        }
        Ok(QModel::Constant(q))
    }

    /// Evaluates the covariance map. Smoothed outputs are convex
    /// combinations of outer products plus `ridge * I`, hence positive
    /// definite by construction.
    pub fn at(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match self {
            QModel::Constant(q) => Ok(q.clone()),
            QModel::Smoothed {
                outer,
                state_dim,
                ridge,
            } => {
                let (flat, _) = outer.predict_detailed(x);
                let d = *state_dim;
                let mut q = DMatrix::from_fn(d, d, |i, j| flat[i * d + j]);
                q = symmetrize(&q);
                for i in 0..d {
                    q[(i, i)] += ridge;
                }
                Ok(q)
            }
        }
    }
}

/// Learns the conditional covariance from held-out residuals.
///
/// Residuals `r_i = z_i - f_hat(x_i)` are formed on rows the mean map never
/// saw, their outer products are smoothed with a Nadaraya-Watson model whose
/// bandwidth is selected on the same leave-one-out criterion as [`nw_fit`],
/// and a ridge of `1e-6` times the mean state variance keeps every output
/// invertible.
pub fn fit_q_residuals(
    heldout: &SupervisedSet,
    f_hat: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    bandwidth_grid: &[f64],
) -> Result<QModel> {
    let d = heldout.state_dim();
    let m = heldout.len();
    if m < d + 1 {
        return Err(CoreError::InsufficientData {
            needed: d + 1,
            got: m,
        });
    }
    let mut flat = DMatrix::zeros(m, d * d);
    for i in 0..m {
        let r = heldout.z_row(i) - f_hat(&heldout.x_row(i));
        for a in 0..d {
            for b in 0..d {
                flat[(i, a * d + b)] = r[a] * r[b];
            }
        }
    }
    let outer_set = SupervisedSet::new(heldout.xs().clone(), flat)?;
    let outer = nw_fit(&outer_set, bandwidth_grid)?;
    let ridge = 1e-6 * mean_state_variance(heldout.zs());
    Ok(QModel::Smoothed {
        outer,
        state_dim: d,
        ridge,
    })
}
