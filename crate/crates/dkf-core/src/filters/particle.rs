//! Bootstrap particle filter with systematic resampling.
//!
//! The schedule is resample, propagate, reweight on every step, with no
//! effective-sample-size gating; weights therefore always reflect exactly
//! one observation.

use nalgebra::DVector;
use rand::{Rng, RngCore};

use crate::error::{CoreError, Result};
use crate::models::StateModel;

/// Draws `log_weights.len()` parent indices with expected multiplicity
/// proportional to the weights, using one uniform draw `u` in `[0, 1)`.
pub fn systematic_resample(log_weights: &[f64], u: f64) -> Result<Vec<usize>> {
    let n = log_weights.len();
    let peak = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY || peak.is_nan() {
        return Err(CoreError::WeightCollapse);
    }
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - peak).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(CoreError::WeightCollapse);
    }
    let stride = total / n as f64;
    let mut indices = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut parent = 0;
    for k in 0..n {
        let position = (k as f64 + u) * stride;
        while cumulative < position && parent + 1 < n {
            parent += 1;
            cumulative += weights[parent];
        }
        indices.push(parent);
    }
    Ok(indices)
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    particles: Vec<DVector<f64>>,
    log_weights: Vec<f64>,
}

impl ParticleEnsemble {
    /// Draws the initial ensemble from the state model's initial law with
    /// uniform weights.
    pub fn from_prior(state: &dyn StateModel, count: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if count == 0 {
            return Err(CoreError::InvalidArgument(
                "particle count must be positive".into(),
            ));
        }
        let particles = (0..count).map(|_| state.sample_initial(rng)).collect();
        Ok(Self {
            particles,
            log_weights: vec![0.0; count],
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Folds one observation into the current weights.
    pub fn reweight(&mut self, loglik: &dyn Fn(&DVector<f64>) -> f64) -> Result<()> {
        for (particle, lw) in self.particles.iter().zip(self.log_weights.iter_mut()) {
            *lw += loglik(particle);
        }
        if self
            .log_weights
            .iter()
            .all(|lw| *lw == f64::NEG_INFINITY || lw.is_nan())
        {
            return Err(CoreError::WeightCollapse);
        }
        Ok(())
    }

    /// One full filter step: resample parents, propagate through the
    /// dynamics, weight by the new observation.
    pub fn step(
        &mut self,
        state: &dyn StateModel,
        loglik: &dyn Fn(&DVector<f64>) -> f64,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let u: f64 = rng.random();
        let parents = systematic_resample(&self.log_weights, u)?;
        let propagated: Vec<DVector<f64>> = parents
            .iter()
            .map(|&p| state.sample_transition(&self.particles[p], rng))
            .collect();
        self.particles = propagated;
        self.log_weights.fill(0.0);
        self.reweight(loglik)
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        let dim = self.particles[0].len();
        let peak = self
            .log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut mean = DVector::zeros(dim);
        for (particle, lw) in self.particles.iter().zip(&self.log_weights) {
            let w = (lw - peak).exp();
            total += w;
            mean += particle * w;
        }
        mean / total
    }

    /// `1 / sum(normalized weights squared)`: the familiar degeneracy gauge.
    pub fn effective_sample_size(&self) -> f64 {
        let peak = self
            .log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for lw in &self.log_weights {
            let w = (lw - peak).exp();
            total += w;
            total_sq += w * w;
        }
        total * total / total_sq
    }
}
