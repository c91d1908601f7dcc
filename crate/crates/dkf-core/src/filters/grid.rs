//! Dense-grid filtering for scalar states.
//!
//! A uniform grid carries the posterior as point masses. The transition
//! kernel is discretized once into a column-stochastic matrix, so each step
//! is a matrix-vector product followed by a pointwise likelihood reweight.
//! At a couple of thousand points this is near-exact for smooth 1-D models
//! and serves as the reference the approximate filters are judged against.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct Grid1d {
    points: Vec<f64>,
    step: f64,
}

impl Grid1d {
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || !lo.is_finite() || !hi.is_finite() || lo > hi || (count > 1 && lo == hi) {
            return Err(CoreError::InvalidArgument(
                "grid needs an increasing range and at least one point".into(),
            ));
        }
        if count == 1 {
            return Ok(Self {
                points: vec![0.5 * (lo + hi)],
                step: 0.0,
            });
        }
        let step = (hi - lo) / (count - 1) as f64;
        let points = (0..count).map(|i| lo + i as f64 * step).collect();
        Ok(Self { points, step })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn step(&self) -> f64 {
        self.step
    }
}

/// Column-stochastic discretization of a scalar transition kernel.
#[derive(Debug, Clone)]
pub struct GridTransition {
    kernel: DMatrix<f64>,
}

impl GridTransition {
    /// `log_kernel(to, from)` is the transition log density; columns are
    /// normalized so total mass is conserved exactly on the grid.
    pub fn new(grid: &Grid1d, log_kernel: &dyn Fn(f64, f64) -> f64) -> Result<Self> {
        let n = grid.len();
        let mut kernel = DMatrix::zeros(n, n);
        for j in 0..n {
            let from = grid.points[j];
            let mut peak = f64::NEG_INFINITY;
            for i in 0..n {
                let lk = log_kernel(grid.points[i], from);
                kernel[(i, j)] = lk;
                peak = peak.max(lk);
            }
            if peak == f64::NEG_INFINITY {
                return Err(CoreError::DegenerateModel(format!(
                    "transition kernel vanishes on the whole grid from z = {from}"
                )));
            }
            let mut total = 0.0;
            for i in 0..n {
                let w = (kernel[(i, j)] - peak).exp();
                kernel[(i, j)] = w;
                total += w;
            }
            for i in 0..n {
                kernel[(i, j)] /= total;
            }
        }
        Ok(Self { kernel })
    }

    /// Convenience for linear-Gaussian dynamics `z' = a z + N(0, var)`.
    pub fn scalar_ar1(grid: &Grid1d, a: f64, var: f64) -> Result<Self> {
        if var <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "transition variance must be positive".into(),
            ));
        }
        let inv2 = 0.5 / var;
        Self::new(grid, &|to, from| {
            let diff = to - a * from;
            -diff * diff * inv2
        })
    }
}

/// Point masses over a grid; always normalized to sum to one.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    mass: DVector<f64>,
}

impl GridPosterior {
    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    pub fn mean(&self, grid: &Grid1d) -> f64 {
        self.mass
            .iter()
            .zip(grid.points())
            .map(|(m, z)| m * z)
            .sum()
    }

    pub fn variance(&self, grid: &Grid1d) -> f64 {
        let mean = self.mean(grid);
        self.mass
            .iter()
            .zip(grid.points())
            .map(|(m, z)| m * (z - mean) * (z - mean))
            .sum()
    }
}

fn reweight(mut mass: DVector<f64>, grid: &Grid1d, loglik: &dyn Fn(f64) -> f64) -> Result<GridPosterior> {
    let logs: Vec<f64> = grid.points().iter().map(|&z| loglik(z)).collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY || peak.is_nan() {
        return Err(CoreError::NumericalFailure(
            "likelihood vanished on the whole grid".into(),
        ));
    }
    for (m, lk) in mass.iter_mut().zip(&logs) {
        *m *= (lk - peak).exp();
    }
    let total = mass.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(CoreError::NumericalFailure(
            "grid posterior mass underflowed; widen or refine the grid".into(),
        ));
    }
    mass /= total;
    Ok(GridPosterior { mass })
}

/// Starts the filter: prior density times first-observation likelihood.
pub fn grid_init(
    grid: &Grid1d,
    log_prior: &dyn Fn(f64) -> f64,
    loglik: &dyn Fn(f64) -> f64,
) -> Result<GridPosterior> {
    let prior: Vec<f64> = grid.points().iter().map(|&z| log_prior(z)).collect();
    let peak = prior.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Err(CoreError::DegenerateModel(
            "prior vanishes on the whole grid".into(),
        ));
    }
    let mass = DVector::from_iterator(grid.len(), prior.iter().map(|lp| (lp - peak).exp()));
    reweight(mass, grid, loglik)
}

/// Advances one step: transition product, then likelihood reweighting.
pub fn grid_step(
    post: &GridPosterior,
    grid: &Grid1d,
    transition: &GridTransition,
    loglik: &dyn Fn(f64) -> f64,
) -> Result<GridPosterior> {
    let predicted = &transition.kernel * &post.mass;
    reweight(predicted, grid, loglik)
}
