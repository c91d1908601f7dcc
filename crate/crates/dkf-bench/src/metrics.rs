//! Error metrics and feature-corruption transforms for benchmark runs.

use dkf_core::filters::{Grid1d, GridPosterior};
use dkf_core::gaussian::GaussianBelief;
use nalgebra::DMatrix;

use crate::error::{BenchError, Result};

/// Root mean squared error over all time steps and coordinates.
pub fn rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(BenchError::Metric(format!(
            "shape mismatch: predictions {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(BenchError::Metric("empty prediction matrix".into()));
    }
    let n = (pred.nrows() * pred.ncols()) as f64;
    Ok(((pred - truth).norm_squared() / n).sqrt())
}

/// RMSE divided by the RMS of the true states, so predicting identically
/// zero scores exactly one.
pub fn normalized_rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    let scale = rmse(&DMatrix::zeros(truth.nrows(), truth.ncols()), truth)?;
    if scale == 0.0 {
        return Err(BenchError::Metric(
            "true states are identically zero; normalized RMSE is undefined".into(),
        ));
    }
    Ok(rmse(pred, truth)? / scale)
}

/// Mean absolute angular error between planar predictions and truth, in
/// radians wrapped into `[0, pi]`. Rows whose true vector is exactly zero
/// have no direction and are skipped; the skip count is returned.
pub fn mean_abs_angular_error(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
) -> Result<(f64, usize)> {
    if pred.ncols() != 2 || truth.ncols() != 2 {
        return Err(BenchError::Metric(
            "angular error is defined for two columns only".into(),
        ));
    }
    if pred.nrows() != truth.nrows() {
        return Err(BenchError::Metric("row count mismatch".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for t in 0..truth.nrows() {
        if truth[(t, 0)] == 0.0 && truth[(t, 1)] == 0.0 {
            skipped += 1;
            continue;
        }
        let a = pred[(t, 1)].atan2(pred[(t, 0)]);
        let b = truth[(t, 1)].atan2(truth[(t, 0)]);
        let mut diff = (a - b).abs();
        if diff > std::f64::consts::PI {
            diff = std::f64::consts::TAU - diff;
        }
        total += diff;
        used += 1;
    }
    if used == 0 {
        return Err(BenchError::Metric(
            "every truth row was the zero vector; angular error is undefined".into(),
        ));
    }
    Ok((total / used as f64, skipped))
}

/// Total variation distance between a one-dimensional Gaussian belief and
/// a grid posterior, by comparing per-cell masses.
///
/// Each grid point owns the cell of one step width centred on it, and the
/// Gaussian is discretized exactly the way the grid filter discretizes its
/// own posterior: midpoint density times step. Sharing the scheme lets the
/// shared discretization bias cancel in the comparison, so two sharp but
/// matching distributions still score near zero. Gaussian mass that falls
/// outside the grid counts fully toward the distance, since the reference
/// carries no mass there. Fails only when the grid visibly truncates the
/// reference posterior itself, because then the reference is untrustworthy.
pub fn tv_distance_grid(
    belief: &GaussianBelief,
    grid: &Grid1d,
    reference: &GridPosterior,
) -> Result<f64> {
    if belief.dim() != 1 {
        return Err(BenchError::Metric(
            "grid total variation is defined for one-dimensional beliefs".into(),
        ));
    }
    let n = grid.len();
    if reference.mass().len() != n {
        return Err(BenchError::Metric(format!(
            "grid has {n} points but the posterior carries {}",
            reference.mass().len()
        )));
    }
    let mass_peak = reference.mass().amax();
    if reference.mass()[0] > 1e-8 * mass_peak || reference.mass()[n - 1] > 1e-8 * mass_peak {
        return Err(BenchError::Metric(
            "grid does not cover the reference posterior; boundary mass is not negligible".into(),
        ));
    }

    let mu = belief.mean()[0];
    let var = belief.cov()[(0, 0)];
    if !(var > 0.0 && var.is_finite() && mu.is_finite()) {
        return Err(BenchError::Metric(format!(
            "belief is not a proper Gaussian: mean {mu}, variance {var}"
        )));
    }
    let inv2 = 0.5 / var;
    let norm = 1.0 / (std::f64::consts::TAU * var).sqrt();
    let step = grid.step();

    let mut acc = 0.0;
    let mut covered = 0.0;
    for (j, &z) in grid.points().iter().enumerate() {
        let cell = norm * (-(z - mu) * (z - mu) * inv2).exp() * step;
        covered += cell;
        acc += (cell - reference.mass()[j]).abs();
    }
    let outside = (1.0 - covered).max(0.0);
    Ok((0.5 * (acc + outside)).clamp(0.0, 1.0))
}

/// Per-column location and spread of a reference feature block, used to
/// standardize corruption transforms.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureStats {
    /// Column means and standard deviations of a reference block, normally
    /// the training observations.
    pub fn from_reference(block: &DMatrix<f64>) -> Result<Self> {
        if block.nrows() < 2 {
            return Err(BenchError::Metric(
                "feature statistics need at least two reference rows".into(),
            ));
        }
        let rows = block.nrows() as f64;
        let mut mean = Vec::with_capacity(block.ncols());
        let mut std = Vec::with_capacity(block.ncols());
        for j in 0..block.ncols() {
            let mu = block.column(j).sum() / rows;
            let var = block.column(j).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows;
            let sd = var.sqrt();
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(BenchError::Metric(format!(
                    "feature column {j} has non-positive spread {sd}"
                )));
            }
            mean.push(mu);
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.mean[j]
    }

    pub fn std(&self, j: usize) -> f64 {
        self.std[j]
    }
}

/// Shifts one feature column by a fixed number of reference standard
/// deviations, leaving every other column bit-identical.
pub fn inject_noise(
    features: &DMatrix<f64>,
    feature_index: usize,
    offset_z: f64,
    stats: &FeatureStats,
) -> Result<DMatrix<f64>> {
    if feature_index >= features.ncols() {
        return Err(BenchError::Metric(format!(
            "feature index {feature_index} out of range for {} columns",
            features.ncols()
        )));
    }
    if stats.dim() != features.ncols() {
        return Err(BenchError::Metric("feature statistics dimension mismatch".into()));
    }
    let mut out = features.clone();
    let shift = offset_z * stats.std(feature_index);
    for t in 0..out.nrows() {
        out[(t, feature_index)] += shift;
    }
    Ok(out)
}

/// Clamps every feature's z-score against the reference statistics to
/// `[-threshold_z, threshold_z]`, then maps back to raw units.
pub fn saturate_features(
    features: &DMatrix<f64>,
    threshold_z: f64,
    stats: &FeatureStats,
) -> Result<DMatrix<f64>> {
    if !(threshold_z > 0.0) {
        return Err(BenchError::Metric(format!(
            "saturation threshold must be positive, got {threshold_z}"
        )));
    }
    if stats.dim() != features.ncols() {
        return Err(BenchError::Metric("feature statistics dimension mismatch".into()));
    }
    let mut out = features.clone();
    for j in 0..out.ncols() {
        let mu = stats.mean(j);
        let sd = stats.std(j);
        // Values inside the band are left untouched so the transform is
        // exactly the identity there and exactly idempotent on the rest.
        for t in 0..out.nrows() {
            let z = (out[(t, j)] - mu) / sd;
            if z > threshold_z {
                out[(t, j)] = mu + sd * threshold_z;
            } else if z < -threshold_z {
                out[(t, j)] = mu - sd * threshold_z;
            }
        }
    }
    Ok(out)
}
