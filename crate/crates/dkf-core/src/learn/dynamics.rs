//! Least-squares system identification from sampled trajectories.

use nalgebra::{DMatrix, DVector};

use super::{mean_state_variance, SupervisedSet};
use crate::error::{CoreError, Result};
use crate::gaussian::LinearStateSpec;
use crate::linalg::{symmetrize, CholFactor, DEFAULT_PD_TOL};
use crate::models::LinearGaussianObs;

/// Solves `gram * theta = rhs` column by column, retrying once with a tiny
/// relative ridge when the Gram matrix is numerically singular.
fn solve_gram(gram: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = CholFactor::new(gram, DEFAULT_PD_TOL).or_else(|| {
        let k = gram.nrows();
        let bump = 1e-10 * gram.trace().abs().max(1.0) / k as f64;
        let mut padded = gram.clone();
        for i in 0..k {
            padded[(i, i)] += bump;
        }
        CholFactor::new(&padded, DEFAULT_PD_TOL)
    });
    let Some(chol) = chol else {
        return Err(CoreError::DegenerateModel(
            "regression design has no usable Gram factorization".into(),
        ));
    };
    Ok(chol.solve_mat(rhs))
}

/// Fits linear dynamics `z' = A z + noise` from one state trajectory whose
/// rows are consecutive states.
///
/// `A` comes from least squares over consecutive pairs, the process noise
/// from the residual covariance plus a small ridge, and the stationary
/// covariance from the fixed-point equation. Estimated dynamics with a
/// spectral radius at or above one are rejected instead of silently
/// producing a divergent model.
pub fn fit_state_dynamics(states: &DMatrix<f64>) -> Result<LinearStateSpec> {
    let t = states.nrows();
    let d = states.ncols();
    if d == 0 {
        return Err(CoreError::InvalidArgument(
            "state trajectory has zero columns".into(),
        ));
    }
    if t < d + 2 {
        return Err(CoreError::InsufficientData {
            needed: d + 2,
            got: t,
        });
    }
    let pairs = t - 1;
    let prev = states.rows(0, pairs);
    let next = states.rows(1, pairs);
    let gram = prev.transpose() * prev;
    let cross = prev.transpose() * next;
    // Each Gram solve column recovers one row of A.
    let a_hat = solve_gram(&gram, &cross)?.transpose();

    let resid = next - (prev * a_hat.transpose());
    let mut gamma = symmetrize(&(resid.transpose() * &resid / pairs as f64));
    let ridge = 1e-6 * mean_state_variance(states);
    for i in 0..d {
        gamma[(i, i)] += ridge;
    }
    LinearStateSpec::new(a_hat, gamma)
}

/// Fits a linear-Gaussian observation map `x = H z + b + noise` by least
/// squares with an intercept, from paired observation and state rows.
pub fn fit_linear_observation(data: &SupervisedSet) -> Result<LinearGaussianObs> {
    let m = data.len();
    let d = data.state_dim();
    let n = data.obs_dim();
    if m < d + 2 {
        return Err(CoreError::InsufficientData {
            needed: d + 2,
            got: m,
        });
    }
    let mut design = DMatrix::zeros(m, d + 1);
    for i in 0..m {
        for j in 0..d {
            design[(i, j)] = data.zs()[(i, j)];
        }
        design[(i, d)] = 1.0;
    }
    let gram = design.transpose() * &design;
    let cross = design.transpose() * data.xs();
    let theta = solve_gram(&gram, &cross)?;

    let h = DMatrix::from_fn(n, d, |i, j| theta[(j, i)]);
    let b = DVector::from_fn(n, |i, _| theta[(d, i)]);
    let resid = data.xs() - design * &theta;
    let mut lambda = symmetrize(&(resid.transpose() * &resid / m as f64));
    let ridge = 1e-6 * mean_state_variance(data.xs());
    for i in 0..n {
        lambda[(i, i)] += ridge;
    }
    LinearGaussianObs::new(h, b, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::StateModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn noise_free_decay_recovers_the_coefficient_exactly() {
        let t = 20;
        let mut states = DMatrix::zeros(t, 1);
        states[(0, 0)] = 3.0;
        for i in 1..t {
            states[(i, 0)] = 0.5 * states[(i - 1, 0)];
        }
        let spec = fit_state_dynamics(&states).unwrap();
        assert!((spec.a()[(0, 0)] - 0.5).abs() < 1e-12);
        let ridge = 1e-6 * mean_state_variance(&states);
        assert!((spec.gamma()[(0, 0)] - ridge).abs() < 1e-12 * ridge.max(1.0));
    }

    #[test]
    fn long_runs_recover_planted_two_dimensional_dynamics() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.05, 0.0, 0.8]);
        let gamma = DMatrix::identity(2, 2) * 0.1;
        let state = LinearStateSpec::new(a.clone(), gamma.clone()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let t = 10_000;
        let mut states = DMatrix::zeros(t, 2);
        let mut z = state.sample_initial(&mut rng);
        for i in 0..t {
            for j in 0..2 {
                states[(i, j)] = z[j];
            }
            z = state.sample_transition(&z, &mut rng);
        }
        let spec = fit_state_dynamics(&states).unwrap();
        assert!((spec.a() - &a).amax() < 0.05, "A error {}", (spec.a() - &a).amax());
        assert!((spec.gamma() - &gamma).amax() < 0.02);
    }

    #[test]
    fn a_frozen_state_is_reported_as_unstable() {
        let states = DMatrix::from_element(50, 1, 1.0);
        let err = fit_state_dynamics(&states).unwrap_err();
        assert!(matches!(err, CoreError::UnstableDynamics { .. }));
    }

    #[test]
    fn too_short_a_trajectory_is_rejected() {
        let states = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.1, 0.2, 0.3]);
        let err = fit_state_dynamics(&states).unwrap_err();
        assert!(matches!(err, CoreError::InsufficientData { needed: 4, got: 3 }));
    }

    #[test]
    fn exact_linear_observations_recover_map_and_intercept() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let m = 40;
        let h = DMatrix::from_row_slice(3, 2, &[1.0, -0.5, 0.25, 2.0, 0.0, 1.5]);
        let b = DVector::from_row_slice(&[0.1, -0.2, 0.3]);
        let zs = DMatrix::from_fn(m, 2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let mut xs = DMatrix::zeros(m, 3);
        for i in 0..m {
            let x = &h * zs.row(i).transpose() + &b;
            for j in 0..3 {
                xs[(i, j)] = x[j];
            }
        }
        let data = SupervisedSet::new(xs, zs).unwrap();
        let obs = fit_linear_observation(&data).unwrap();
        assert!((obs.h() - &h).amax() < 1e-10);
        assert!((obs.bias() - &b).amax() < 1e-10);
        let ridge = 1e-6 * mean_state_variance(data.xs());
        assert!((obs.lambda() - DMatrix::identity(3, 3) * ridge).amax() < 1e-10);
    }

    #[test]
    fn noisy_observations_recover_the_noise_covariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let m = 20_000;
        let zs = DMatrix::from_fn(m, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut xs = DMatrix::zeros(m, 2);
        for i in 0..m {
            let e0: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let e1: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
            xs[(i, 0)] = 2.0 * zs[(i, 0)] + 0.3 * e0;
            xs[(i, 1)] = -zs[(i, 0)] + 0.5 * e1;
        }
        let data = SupervisedSet::new(xs, zs).unwrap();
        let obs = fit_linear_observation(&data).unwrap();
        assert!((obs.h()[(0, 0)] - 2.0).abs() < 0.02);
        assert!((obs.h()[(1, 0)] + 1.0).abs() < 0.02);
        assert!((obs.lambda()[(0, 0)] - 0.09).abs() < 0.005);
        assert!((obs.lambda()[(1, 1)] - 0.25).abs() < 0.01);
        assert!(obs.lambda()[(0, 1)].abs() < 0.01);
    }
}
