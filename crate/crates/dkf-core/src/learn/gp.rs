//! Gaussian process regression with marginal-likelihood model selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{mean_state_variance, median_pairwise_distance, SupervisedSet};
use crate::error::{CoreError, Result};
use crate::gaussian::LN_2PI;
use crate::learn::kernel::{kernel_eval, KernelFamily, KernelSpec};
use crate::linalg::{CholFactor, DEFAULT_PD_TOL};

/// One candidate hyperparameter setting: signal variance, squared length
/// scale, and observation noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperTriple {
    pub sigma_f2: f64,
    pub sigma_l2: f64,
    pub sigma_n2: f64,
}

/// Per-output-dimension posterior weights and the hyperparameters they
/// were trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GpOutputDim {
    spec: KernelSpec,
    noise: f64,
    alpha: DVector<f64>,
}

/// A fitted Gaussian process regressor. Each output dimension carries its
/// own hyperparameters and weight vector over the shared training inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    train_x: DMatrix<f64>,
    dims: Vec<GpOutputDim>,
}

/// The default 7 x 7 x 5 log-spaced hyperparameter grid. Signal and noise
/// variances are anchored to the mean state variance, the squared length
/// scale to the squared median pairwise distance of the observations.
pub fn default_hyper_grid(data: &SupervisedSet) -> Vec<HyperTriple> {
    let var_base = mean_state_variance(data.zs());
    let len_base = median_pairwise_distance(data.xs()).powi(2).max(f64::MIN_POSITIVE);
    let logspace = |base: f64, lo: f64, hi: f64, count: usize| -> Vec<f64> {
        (0..count)
            .map(|k| {
                let t = k as f64 / (count - 1) as f64;
                base * 10f64.powf(lo + (hi - lo) * t)
            })
            .collect()
    };
    let f2s = logspace(var_base, -2.0, 2.0, 7);
    let l2s = logspace(len_base, -2.0, 2.0, 7);
    let n2s = logspace(var_base, -4.0, 0.0, 5);
    let mut grid = Vec::with_capacity(f2s.len() * l2s.len() * n2s.len());
    for &sigma_f2 in &f2s {
        for &sigma_l2 in &l2s {
            for &sigma_n2 in &n2s {
                grid.push(HyperTriple {
                    sigma_f2,
                    sigma_l2,
                    sigma_n2,
                });
            }
        }
    }
    grid
}

fn gram_matrix(xs: &DMatrix<f64>, spec: &KernelSpec) -> DMatrix<f64> {
    let m = xs.nrows();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        let xi = xs.row(i).transpose();
        for j in i..m {
            let v = kernel_eval(spec, &xi, &xs.row(j).transpose());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Log marginal likelihood of one output column given a factored kernel
/// matrix: `-z' alpha / 2 - log det / 2 - m ln(2 pi) / 2`.
fn log_marginal(chol: &CholFactor, z: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = chol.solve_vec(z);
    let m = z.len() as f64;
    let lml = -0.5 * z.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * m * LN_2PI;
    (lml, alpha)
}

/// Fits one Gaussian process per output dimension by exhaustive search
/// over the hyperparameter grid.
///
/// Each candidate's kernel matrix is factored once and scored against every
/// output column, so the grid cost does not scale with the output
/// dimension. Candidates whose kernel matrix is numerically singular are
/// skipped; if that removes the whole grid the fit fails. Zero noise
/// variance is allowed and yields an interpolating regressor when the
/// kernel matrix tolerates it.
pub fn gp_fit(data: &SupervisedSet, family: KernelFamily, grid: &[HyperTriple]) -> Result<GpModel> {
    let m = data.len();
    let d = data.state_dim();
    if m < 2 {
        return Err(CoreError::InsufficientData { needed: 2, got: m });
    }
    if grid.is_empty() {
        return Err(CoreError::InvalidArgument(
            "hyperparameter grid must not be empty".into(),
        ));
    }
    let mut best: Vec<Option<(f64, HyperTriple)>> = vec![None; d];
    let mut any_usable = false;
    for trip in grid {
        if !(trip.sigma_n2 >= 0.0 && trip.sigma_n2.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "noise variance must be finite and non-negative, got {}",
                trip.sigma_n2
            )));
        }
        let spec = KernelSpec::new(family, trip.sigma_f2, trip.sigma_l2)?;
        let mut kmat = gram_matrix(data.xs(), &spec);
        for i in 0..m {
            kmat[(i, i)] += trip.sigma_n2;
        }
        let Some(chol) = CholFactor::new(&kmat, DEFAULT_PD_TOL) else {
            continue;
        };
        any_usable = true;
        for (k, slot) in best.iter_mut().enumerate() {
            let z = DVector::from_fn(m, |i, _| data.zs()[(i, k)]);
            let (lml, _) = log_marginal(&chol, &z);
            if !lml.is_finite() {
                continue;
            }
            let better = match slot {
                None => true,
                Some((cur, _)) => lml > *cur,
            };
            if better {
                *slot = Some((lml, *trip));
            }
        }
    }
    if !any_usable {
        return Err(CoreError::NumericalFailure(
            "every hyperparameter candidate produced a singular kernel matrix".into(),
        ));
    }
    let mut dims = Vec::with_capacity(d);
    for (k, slot) in best.iter().enumerate() {
        let Some((_, trip)) = slot else {
            return Err(CoreError::NumericalFailure(format!(
                "no usable hyperparameters for output dimension {k}"
            )));
        };
        let spec = KernelSpec::new(family, trip.sigma_f2, trip.sigma_l2)?;
        let mut kmat = gram_matrix(data.xs(), &spec);
        for i in 0..m {
            kmat[(i, i)] += trip.sigma_n2;
        }
        let chol = CholFactor::new(&kmat, DEFAULT_PD_TOL).ok_or_else(|| {
            CoreError::NumericalFailure("selected kernel matrix lost its factorization".into())
        })?;
        let z = DVector::from_fn(m, |i, _| data.zs()[(i, k)]);
        let alpha = chol.solve_vec(&z);
        dims.push(GpOutputDim {
            spec,
            noise: trip.sigma_n2,
            alpha,
        });
    }
    Ok(GpModel {
        train_x: data.xs().clone(),
        dims,
    })
}

impl GpModel {
    pub fn output_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn train_len(&self) -> usize {
        self.train_x.nrows()
    }

    /// Hyperparameters selected for one output dimension.
    pub fn selected(&self, dim: usize) -> HyperTriple {
        let d = &self.dims[dim];
        HyperTriple {
            sigma_f2: d.spec.sigma_f2,
            sigma_l2: d.spec.sigma_l2,
            sigma_n2: d.noise,
        }
    }

    /// Posterior weight vector for one output dimension.
    pub fn alpha(&self, dim: usize) -> &DVector<f64> {
        &self.dims[dim].alpha
    }

    /// Posterior mean: each output is the cross-kernel vector against the
    /// training inputs dotted with that dimension's weights.
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.train_x.nrows();
        DVector::from_fn(self.dims.len(), |k, _| {
            let dim = &self.dims[k];
            let mut acc = 0.0;
            for i in 0..m {
                acc += kernel_eval(&dim.spec, x, &self.train_x.row(i).transpose()) * dim.alpha[i];
            }
            acc
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_set(m: usize, n: usize, d: usize, seed: u64) -> SupervisedSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let xs = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let zs = DMatrix::from_fn(m, d, |i, _| {
            xs.row(i).iter().map(|v| v.sin()).sum::<f64>()
                + 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        SupervisedSet::new(xs, zs).unwrap()
    }

    fn dense_lml(data: &SupervisedSet, trip: &HyperTriple, family: KernelFamily, dim: usize) -> f64 {
        // Direct evaluation through nalgebra's own Cholesky, independent of
        // the factorization used by the fit.
        let m = data.len();
        let spec = KernelSpec::new(family, trip.sigma_f2, trip.sigma_l2).unwrap();
        let mut kmat = gram_matrix(data.xs(), &spec);
        for i in 0..m {
            kmat[(i, i)] += trip.sigma_n2;
        }
        let chol = nalgebra::Cholesky::new(kmat).expect("test kernel matrix is PD");
        let z = DVector::from_fn(m, |i, _| data.zs()[(i, dim)]);
        let alpha = chol.solve(&z);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * z.dot(&alpha) - 0.5 * log_det - 0.5 * m as f64 * LN_2PI
    }

    #[test]
    fn grid_search_selects_the_largest_marginal_likelihood() {
        let data = random_set(12, 2, 2, 3);
        let grid = [
            HyperTriple { sigma_f2: 0.5, sigma_l2: 0.5, sigma_n2: 0.01 },
            HyperTriple { sigma_f2: 1.0, sigma_l2: 1.0, sigma_n2: 0.05 },
            HyperTriple { sigma_f2: 2.0, sigma_l2: 0.2, sigma_n2: 0.1 },
            HyperTriple { sigma_f2: 1.0, sigma_l2: 4.0, sigma_n2: 0.001 },
            HyperTriple { sigma_f2: 4.0, sigma_l2: 1.0, sigma_n2: 0.5 },
        ];
        let model = gp_fit(&data, KernelFamily::Rbf, &grid).unwrap();
        for dim in 0..2 {
            let mut best = f64::NEG_INFINITY;
            let mut best_trip = grid[0];
            for trip in &grid {
                let lml = dense_lml(&data, trip, KernelFamily::Rbf, dim);
                if lml > best {
                    best = lml;
                    best_trip = *trip;
                }
            }
            assert_eq!(model.selected(dim), best_trip);
        }
    }

    #[test]
    fn zero_noise_interpolates_the_training_labels() {
        let m = 8;
        let xs = DMatrix::from_fn(m, 1, |i, _| i as f64);
        let zs = DMatrix::from_fn(m, 1, |i, _| (i as f64 * 0.7).cos());
        let data = SupervisedSet::new(xs, zs).unwrap();
        let grid = [HyperTriple { sigma_f2: 1.0, sigma_l2: 0.5, sigma_n2: 0.0 }];
        let model = gp_fit(&data, KernelFamily::Rbf, &grid).unwrap();
        for i in 0..m {
            let pred = model.predict(&data.x_row(i))[0];
            assert!(
                (pred - data.zs()[(i, 0)]).abs() < 1e-6,
                "row {i}: {pred} vs {}",
                data.zs()[(i, 0)]
            );
        }
    }

    #[test]
    fn weights_on_five_points_match_a_dense_linear_solve() {
        let xs = DMatrix::from_row_slice(5, 1, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let zs = DMatrix::from_row_slice(5, 1, &[0.9, -0.3, 0.1, 0.4, -0.8]);
        let data = SupervisedSet::new(xs, zs).unwrap();
        let trip = HyperTriple { sigma_f2: 1.3, sigma_l2: 0.8, sigma_n2: 0.05 };
        let model = gp_fit(&data, KernelFamily::Rbf, &[trip]).unwrap();

        let spec = KernelSpec::new(KernelFamily::Rbf, trip.sigma_f2, trip.sigma_l2).unwrap();
        let mut kmat = gram_matrix(data.xs(), &spec);
        for i in 0..5 {
            kmat[(i, i)] += trip.sigma_n2;
        }
        let z = DVector::from_fn(5, |i, _| data.zs()[(i, 0)]);
        let oracle = kmat.lu().solve(&z).unwrap();
        assert!((model.alpha(0) - oracle).amax() < 1e-10);
    }

    #[test]
    fn far_queries_revert_to_zero_under_the_local_kernel() {
        let data = random_set(15, 2, 1, 7);
        let trip = HyperTriple { sigma_f2: 1.0, sigma_l2: 1.0, sigma_n2: 0.1 };
        let model = gp_fit(&data, KernelFamily::Rbf, &[trip]).unwrap();
        let far = DVector::from_element(2, 1e4);
        assert!(model.predict(&far)[0].abs() < 1e-8);
    }

    #[test]
    fn predictions_match_the_dense_solve_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let data = random_set(20, 3, 2, 11);
        let trip = HyperTriple { sigma_f2: 0.9, sigma_l2: 1.7, sigma_n2: 0.02 };
        let model = gp_fit(&data, KernelFamily::Rbf, &[trip]).unwrap();

        let spec = KernelSpec::new(KernelFamily::Rbf, trip.sigma_f2, trip.sigma_l2).unwrap();
        let mut kmat = gram_matrix(data.xs(), &spec);
        for i in 0..20 {
            kmat[(i, i)] += trip.sigma_n2;
        }
        let lu = kmat.lu();
        for _ in 0..10 {
            let q = DVector::from_fn(3, |_, _| rng.random::<f64>() * 6.0 - 3.0);
            let pred = model.predict(&q);
            for dim in 0..2 {
                let z = DVector::from_fn(20, |i, _| data.zs()[(i, dim)]);
                let alpha = lu.solve(&z).unwrap();
                let mut oracle = 0.0;
                for i in 0..20 {
                    oracle += kernel_eval(&spec, &q, &data.xs().row(i).transpose()) * alpha[i];
                }
                assert!((pred[dim] - oracle).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn additive_kernel_bounds_single_coordinate_influence() {
        // Moving one coordinate, however far, can change an additive-kernel
        // prediction by at most sigma_f2 / n times the weight mass.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let n = 4;
        let data = random_set(25, n, 1, 13);
        let trip = HyperTriple { sigma_f2: 1.5, sigma_l2: 0.6, sigma_n2: 0.05 };
        let model = gp_fit(&data, KernelFamily::Additive, &[trip]).unwrap();
        let weight_mass: f64 = model.alpha(0).iter().map(|a| a.abs()).sum();
        let bound = trip.sigma_f2 / n as f64 * weight_mass;
        for _ in 0..50 {
            let x = DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let mut bumped = x.clone();
            let coord = rng.random_range(0..n);
            bumped[coord] += 1e6 * (rng.random::<f64>() - 0.5);
            let shift = (model.predict(&bumped)[0] - model.predict(&x)[0]).abs();
            assert!(shift <= bound + 1e-12, "shift {shift} exceeds bound {bound}");
        }
    }

    #[test]
    fn all_singular_candidates_fail_loudly() {
        // Identical rows make every noiseless kernel matrix singular.
        let xs = DMatrix::from_element(6, 2, 1.0);
        let zs = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let data = SupervisedSet::new(xs, zs).unwrap();
        let grid = [
            HyperTriple { sigma_f2: 1.0, sigma_l2: 1.0, sigma_n2: 0.0 },
            HyperTriple { sigma_f2: 2.0, sigma_l2: 0.5, sigma_n2: 0.0 },
        ];
        let err = gp_fit(&data, KernelFamily::Rbf, &grid).unwrap_err();
        assert!(matches!(err, CoreError::NumericalFailure(_)));
    }

    #[test]
    fn default_grid_has_the_documented_shape() {
        let data = random_set(10, 2, 1, 19);
        let grid = default_hyper_grid(&data);
        assert_eq!(grid.len(), 7 * 7 * 5);
        assert!(grid.iter().all(|t| t.sigma_f2 > 0.0 && t.sigma_l2 > 0.0 && t.sigma_n2 > 0.0));
        let f2s: Vec<f64> = grid.iter().map(|t| t.sigma_f2).collect();
        let span = f2s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            / f2s.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((span - 1e4).abs() / 1e4 < 1e-9);
    }
}
