//! Regression learners that turn supervised pairs into the conditional
//! moments the discriminative filter consumes.
//!
//! Each learner produces a mean map from observations to states; residual
//! smoothing on a held-out block produces the matching covariance map. The
//! fitted pieces are frozen and safe to query concurrently.

mod dynamics;
mod gp;
mod kernel;
mod mlp;
mod nw;
mod octant;

pub use dynamics::{fit_linear_observation, fit_state_dynamics};
pub use gp::{default_hyper_grid, gp_fit, GpModel, HyperTriple};
pub use kernel::{kernel_eval, KernelFamily, KernelSpec};
pub use mlp::{mlp_fit, MlpModel};
pub use nw::{default_bandwidth_grid, fit_q_residuals, nw_fit, NwModel, QModel};
pub use octant::{sparsify_octants, OctantSummary};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dkf::DiscriminativeModel;
use crate::error::{CoreError, Result};
use crate::models::Trajectory;

/// Paired training rows: observation `xs[i, .]` goes with state `zs[i, .]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervisedSet {
    xs: DMatrix<f64>,
    zs: DMatrix<f64>,
}

impl SupervisedSet {
    pub fn new(xs: DMatrix<f64>, zs: DMatrix<f64>) -> Result<Self> {
        if xs.nrows() == 0 || xs.nrows() != zs.nrows() {
            return Err(CoreError::DimensionMismatch {
                context: "supervised rows",
                expected: xs.nrows().max(1),
                got: zs.nrows(),
            });
        }
        if xs.iter().chain(zs.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::NumericalFailure(
                "supervised data contains non-finite entries".into(),
            ));
        }
        Ok(Self { xs, zs })
    }

    /// Pairs each simulated observation with its underlying state.
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        Self::new(traj.observations.clone(), traj.states.clone())
    }

    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.xs.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.zs.ncols()
    }

    pub fn xs(&self) -> &DMatrix<f64> {
        &self.xs
    }

    pub fn zs(&self) -> &DMatrix<f64> {
        &self.zs
    }

    pub fn x_row(&self, i: usize) -> DVector<f64> {
        self.xs.row(i).transpose()
    }

    pub fn z_row(&self, i: usize) -> DVector<f64> {
        self.zs.row(i).transpose()
    }

    fn take_rows(&self, rows: &[usize]) -> Self {
        let xs = DMatrix::from_fn(rows.len(), self.obs_dim(), |i, j| self.xs[(rows[i], j)]);
        let zs = DMatrix::from_fn(rows.len(), self.state_dim(), |i, j| self.zs[(rows[i], j)]);
        Self { xs, zs }
    }

    /// Random two-thirds/one-third split, seeded for reproducibility. The
    /// larger part is meant for the mean map, the smaller for the residual
    /// covariance, so the two fits never share rows.
    pub fn split_two_to_one(&self, seed: u64) -> Result<(Self, Self)> {
        if self.len() < 3 {
            return Err(CoreError::InsufficientData {
                needed: 3,
                got: self.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let cut = self.len() * 2 / 3;
        Ok((self.take_rows(&order[..cut]), self.take_rows(&order[cut..])))
    }
}

/// Median distance between observation rows, estimated over an evenly
/// strided subsample of at most 500 rows so large sets stay cheap. This is
/// the natural length scale that bandwidth and kernel grids are centered on.
pub fn median_pairwise_distance(xs: &DMatrix<f64>) -> f64 {
    let m = xs.nrows();
    let stride = m.div_ceil(500);
    let rows: Vec<usize> = (0..m).step_by(stride).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in rows.iter().skip(a + 1) {
            let d2: f64 = (xs.row(i) - xs.row(j)).norm_squared();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists[dists.len() / 2];
    if mid > 0.0 {
        mid
    } else {
        1.0
    }
}

/// Mean per-coordinate variance of the states; the scale used for ridge
/// terms and hyperparameter grids.
pub(crate) fn mean_state_variance(zs: &DMatrix<f64>) -> f64 {
    let m = zs.nrows() as f64;
    let mut total = 0.0;
    for j in 0..zs.ncols() {
        let col = zs.column(j);
        let mean = col.sum() / m;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    }
    (total / zs.ncols() as f64).max(f64::MIN_POSITIVE)
}

/// A fitted mean map from observations to states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MeanRegressor {
    Nw(NwModel),
    Gp(GpModel),
    Mlp(MlpModel),
}

impl MeanRegressor {
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            MeanRegressor::Nw(m) => m.predict(x),
            MeanRegressor::Gp(m) => m.predict(x),
            MeanRegressor::Mlp(m) => m.predict(x),
        }
    }
}

/// A learned mean map paired with a learned covariance map; together they
/// form the conditional moments the discriminative filter needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedMoments {
    pub mean: MeanRegressor,
    pub cov: QModel,
}

impl DiscriminativeModel for FittedMoments {
    fn moments(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let f = self.mean.predict(x);
        let q = self.cov.at(x)?;
        Ok((f, q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let xs = DMatrix::from_fn(30, 2, |i, j| (i * 2 + j) as f64);
        let zs = DMatrix::from_fn(30, 1, |i, _| i as f64);
        let set = SupervisedSet::new(xs, zs).unwrap();
        let (train, held) = set.split_two_to_one(9).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(held.len(), 10);
        let mut seen: Vec<f64> = train
            .zs()
            .column(0)
            .iter()
            .chain(held.zs().column(0).iter())
            .cloned()
            .collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert_eq!(seen, expected);
        let (again, _) = set.split_two_to_one(9).unwrap();
        assert_eq!(again.zs(), train.zs());
    }

    #[test]
    fn rejects_non_finite_rows() {
        let mut xs = DMatrix::zeros(3, 2);
        xs[(1, 0)] = f64::NAN;
        let zs = DMatrix::zeros(3, 1);
        assert!(SupervisedSet::new(xs, zs).is_err());
    }

    #[test]
    fn median_distance_matches_direct_computation_on_a_small_set() {
        let xs = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 3.0, 7.0]);
        // All six pairwise distances: 1, 3, 7, 2, 6, 4; sorted median
        // (upper of the two middles) is 4.
        assert!((median_pairwise_distance(&xs) - 4.0).abs() < 1e-12);
    }
}
