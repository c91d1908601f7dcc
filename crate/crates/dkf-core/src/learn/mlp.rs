//! A single-hidden-layer network trained by full-batch gradient descent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::SupervisedSet;
use crate::error::{CoreError, Result};

const WEIGHT_DECAY: f64 = 1e-4;
const PLATEAU_WINDOW: usize = 200;
const PLATEAU_REL_IMPROVEMENT: f64 = 1e-10;

/// A tanh network `w2 * tanh(w1 * x + b1) + b2` with standardization
/// already folded into the weights, so it consumes and produces raw
///, unscaled vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        let hidden = (&self.w1 * x + &self.b1).map(f64::tanh);
        &self.w2 * hidden + &self.b2
    }
}

struct Params {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

/// Mean squared error over the batch plus an L2 penalty on the weight
/// matrices (never the biases).
fn loss_and_grad(p: &Params, xs: &DMatrix<f64>, zs: &DMatrix<f64>) -> (f64, Params) {
    let m = xs.nrows() as f64;
    // Forward pass on all rows at once; activations are m x hidden.
    let act = xs * p.w1.transpose() + DMatrix::from_fn(xs.nrows(), p.b1.len(), |_, j| p.b1[j]);
    let hidden = act.map(f64::tanh);
    let pred = &hidden * p.w2.transpose()
        + DMatrix::from_fn(xs.nrows(), p.b2.len(), |_, j| p.b2[j]);
    let err = pred - zs;
    let data_loss = err.norm_squared() / m;
    let loss = data_loss
        + WEIGHT_DECAY * (p.w1.norm_squared() + p.w2.norm_squared());

    let g_out = err * (2.0 / m);
    let grad_w2 = g_out.transpose() * &hidden + 2.0 * WEIGHT_DECAY * &p.w2;
    let grad_b2 = DVector::from_fn(p.b2.len(), |j, _| g_out.column(j).sum());
    let mut g_hidden = &g_out * &p.w2;
    g_hidden.zip_apply(&hidden, |g, h| *g *= 1.0 - h * h);
    let grad_w1 = g_hidden.transpose() * xs + 2.0 * WEIGHT_DECAY * &p.w1;
    let grad_b1 = DVector::from_fn(p.b1.len(), |j, _| g_hidden.column(j).sum());
    (
        loss,
        Params {
            w1: grad_w1,
            b1: grad_b1,
            w2: grad_w2,
            b2: grad_b2,
        },
    )
}

fn column_stats(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let rows = m.nrows() as f64;
    let mean = DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / rows);
    let sd = DVector::from_fn(m.ncols(), |j, _| {
        let mu = mean[j];
        let var = m.column(j).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / rows;
        var.sqrt().max(1e-12)
    });
    (mean, sd)
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

/// Trains the network on standardized inputs and labels, then folds the
/// standardization back into the weights.
///
/// Descent is plain full-batch gradient descent at a fixed step. Training
/// stops early once the loss stops improving; a non-finite loss aborts with
/// a divergence error, which usually means the step size is too large for
/// the data scale.
pub fn mlp_fit(
    data: &SupervisedSet,
    hidden_width: usize,
    epochs: usize,
    step: f64,
    seed: u64,
) -> Result<MlpModel> {
    if data.len() < 2 {
        return Err(CoreError::InsufficientData {
            needed: 2,
            got: data.len(),
        });
    }
    if hidden_width == 0 || epochs == 0 {
        return Err(CoreError::InvalidArgument(
            "hidden width and epoch count must be positive".into(),
        ));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(CoreError::InvalidArgument(format!(
            "gradient step must be positive and finite, got {step}"
        )));
    }
    let n = data.obs_dim();
    let d = data.state_dim();
    let (x_mean, x_sd) = column_stats(data.xs());
    let (z_mean, z_sd) = column_stats(data.zs());
    let xs = DMatrix::from_fn(data.len(), n, |i, j| (data.xs()[(i, j)] - x_mean[j]) / x_sd[j]);
    let zs = DMatrix::from_fn(data.len(), d, |i, j| (data.zs()[(i, j)] - z_mean[j]) / z_sd[j]);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut p = Params {
        w1: xavier(hidden_width, n, &mut rng),
        b1: DVector::zeros(hidden_width),
        w2: xavier(d, hidden_width, &mut rng),
        b2: DVector::zeros(d),
    };

    let mut best_loss = f64::INFINITY;
    let mut since_improvement = 0;
    for epoch in 0..epochs {
        let (loss, grad) = loss_and_grad(&p, &xs, &zs);
        if !loss.is_finite() {
            return Err(CoreError::Divergence {
                iterations: epoch,
                magnitude: p.w1.amax().max(p.w2.amax()),
                last_stable: None,
            });
        }
        if loss < best_loss * (1.0 - PLATEAU_REL_IMPROVEMENT) {
            best_loss = loss;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= PLATEAU_WINDOW {
                break;
            }
        }
        p.w1 -= step * grad.w1;
        p.b1 -= step * grad.b1;
        p.w2 -= step * grad.w2;
        p.b2 -= step * grad.b2;
    }

    // Fold x standardization into the first layer and z standardization
    // into the second, so the stored weights act on raw vectors.
    let mut w1 = p.w1;
    for j in 0..n {
        let scale = 1.0 / x_sd[j];
        for i in 0..hidden_width {
            w1[(i, j)] *= scale;
        }
    }
    let b1 = p.b1 - &w1 * &x_mean;
    let mut w2 = p.w2;
    for i in 0..d {
        for j in 0..hidden_width {
            w2[(i, j)] *= z_sd[i];
        }
    }
    let b2 = DVector::from_fn(d, |i, _| z_mean[i] + z_sd[i] * p.b2[i]);
    Ok(MlpModel { w1, b1, w2, b2 })
}
