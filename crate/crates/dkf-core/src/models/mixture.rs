//! Gaussian-mixture linear observations with closed-form posterior moments.
//!
//! Each component draws `x = H_l z + N(0, Lambda_l)` with probability `pi_l`.
//! When the latent state is a priori `N(0, S)`, the posterior `p(z | x)` is a
//! Gaussian mixture whose component means, covariances, and responsibilities
//! are available in closed form, so `E(Z | x)` and `Cov(Z | x)` are exact.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{CoreError, Result};
use crate::gaussian::log_density_prefactored;
use crate::linalg::{chol_or_err, log_sum_exp, symmetrize, CholFactor};

use super::{draw_standard_normal, sample_gaussian, ObservationModel};

/// Conditional moments of the latent state given one observation, together
/// with the per-component responsibilities that produced them.
#[derive(Debug, Clone)]
pub struct MixtureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub responsibilities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct KalmanMixtureObs {
    pi: Vec<f64>,
    log_pi: Vec<f64>,
    hs: Vec<DMatrix<f64>>,
    lambda_chols: Vec<CholFactor>,
    /// Posterior covariance of component `l` given prior `N(0, S)`.
    d_mats: Vec<DMatrix<f64>>,
    /// Posterior gain of component `l`: mean given `x` is `V_l x`.
    v_mats: Vec<DMatrix<f64>>,
    /// Marginal observation covariance `H_l S H_l^T + Lambda_l`, factored.
    g_chols: Vec<CholFactor>,
    s: DMatrix<f64>,
}

impl KalmanMixtureObs {
    /// Builds the mixture for a state with stationary prior `N(0, s)`.
    pub fn new(
        pi: &[f64],
        hs: Vec<DMatrix<f64>>,
        lambdas: Vec<DMatrix<f64>>,
        s: DMatrix<f64>,
    ) -> Result<Self> {
        let count = pi.len();
        if count == 0 {
            return Err(CoreError::InvalidArgument(
                "mixture needs at least one component".into(),
            ));
        }
        if hs.len() != count || lambdas.len() != count {
            return Err(CoreError::DimensionMismatch {
                context: "mixture component count",
                expected: count,
                got: hs.len().min(lambdas.len()),
            });
        }
        if pi.iter().any(|&p| p <= 0.0) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(
                "mixture weights must be positive and sum to one".into(),
            ));
        }
        let n = hs[0].nrows();
        let d = hs[0].ncols();
        if s.nrows() != d || s.ncols() != d {
            return Err(CoreError::DimensionMismatch {
                context: "mixture state prior covariance",
                expected: d,
                got: s.nrows(),
            });
        }
        let s = symmetrize(&s);
        let s_chol = chol_or_err(&s, "mixture state prior covariance")?;
        let s_inv = s_chol.inverse();
        let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
        let mut lambda_chols = Vec::with_capacity(count);
        let mut d_mats = Vec::with_capacity(count);
        let mut v_mats = Vec::with_capacity(count);
        let mut g_chols = Vec::with_capacity(count);
        for (h, lambda) in hs.iter().zip(&lambdas) {
            if h.nrows() != n || h.ncols() != d {
                return Err(CoreError::DimensionMismatch {
                    context: "mixture component observation matrix",
                    expected: n,
                    got: h.nrows(),
                });
            }
            if lambda.nrows() != n || lambda.ncols() != n {
                return Err(CoreError::DimensionMismatch {
                    context: "mixture component noise covariance",
                    expected: n,
                    got: lambda.nrows(),
                });
            }
            let lambda = symmetrize(lambda);
            let lam_chol = chol_or_err(&lambda, "mixture component noise covariance")?;
            let lam_inv_h = lam_chol.solve_mat(h);
            let info = symmetrize(&(h.tr_mul(&lam_inv_h) + &s_inv));
            let info_chol = chol_or_err(&info, "mixture posterior information")?;
            let d_mat = info_chol.inverse();
            let v_mat = &d_mat * lam_inv_h.transpose();
            let g = symmetrize(&(h * &s * h.transpose() + &lambda));
            let g_chol = chol_or_err(&g, "mixture marginal observation covariance")?;
            lambda_chols.push(lam_chol);
            d_mats.push(d_mat);
            v_mats.push(v_mat);
            g_chols.push(g_chol);
        }
        Ok(Self {
            pi: pi.to_vec(),
            log_pi,
            hs,
            lambda_chols,
            d_mats,
            v_mats,
            g_chols,
            s,
        })
    }

    /// The default two-component instance: one random projection and its
    /// negation, so `E(X | Z) = 0` and no linear filter can see the state.
    /// The second component observes with one eighth of the noise.
    pub fn zero_mean_pair(state_dim: usize, obs_dim: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let h1 = DMatrix::from_fn(obs_dim, state_dim, |_, _| draw_standard_normal(&mut rng));
        let h2 = -&h1;
        let eye = DMatrix::identity(obs_dim, obs_dim);
        Self::new(
            &[0.5, 0.5],
            vec![h1, h2],
            vec![eye.clone(), eye / 8.0],
            DMatrix::identity(state_dim, state_dim),
        )
    }

    pub fn component_count(&self) -> usize {
        self.pi.len()
    }

    pub fn prior_covariance(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Exact `E(Z | x)` and `Cov(Z | x)` under the stationary state prior.
    pub fn posterior_moments(&self, x: &DVector<f64>) -> Result<MixtureMoments> {
        let n = self.obs_dim();
        let d = self.state_dim();
        if x.len() != n {
            return Err(CoreError::DimensionMismatch {
                context: "mixture observation",
                expected: n,
                got: x.len(),
            });
        }
        let zero = DVector::zeros(n);
        let log_w: Vec<f64> = self
            .log_pi
            .iter()
            .zip(&self.g_chols)
            .map(|(lp, g)| lp + log_density_prefactored(x, &zero, g))
            .collect();
        let norm = log_sum_exp(&log_w);
        if !norm.is_finite() {
            return Err(CoreError::NumericalFailure(
                "mixture responsibilities are not normalizable".into(),
            ));
        }
        let responsibilities: Vec<f64> = log_w.iter().map(|lw| (lw - norm).exp()).collect();
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for ((r, v), d_mat) in responsibilities.iter().zip(&self.v_mats).zip(&self.d_mats) {
            let m = v * x;
            second += (d_mat + &m * m.transpose()) * *r;
            mean += m * *r;
        }
        let cov = symmetrize(&(second - &mean * mean.transpose()));
        Ok(MixtureMoments {
            mean,
            cov,
            responsibilities,
        })
    }

    /// Log likelihood as a cheap function of a scalar state, for dense sweeps
    /// against a fixed observation. Only available when the state is 1-D.
    ///
    /// Expanding the quadratic form once per observation reduces each state
    /// evaluation to a handful of flops regardless of the observation width.
    pub fn scalar_log_likelihood_fn(&self, x: &DVector<f64>) -> Result<impl Fn(f64) -> f64> {
        if self.state_dim() != 1 {
            return Err(CoreError::InvalidArgument(
                "scalar likelihood sweep requires a 1-D state".into(),
            ));
        }
        let n = self.obs_dim() as f64;
        let coeffs: Vec<(f64, f64, f64, f64)> = self
            .log_pi
            .iter()
            .zip(self.hs.iter().zip(&self.lambda_chols))
            .map(|(lp, (h, lam_chol))| {
                let h_col = h.column(0).into_owned();
                let lam_inv_x = lam_chol.solve_vec(x);
                let lam_inv_h = lam_chol.solve_vec(&h_col);
                let c0 = lp - 0.5 * (n * crate::gaussian::LN_2PI + lam_chol.log_det());
                (c0, x.dot(&lam_inv_x), h_col.dot(&lam_inv_x), h_col.dot(&lam_inv_h))
            })
            .collect();
        Ok(move |z: f64| {
            let term = |c: &(f64, f64, f64, f64)| c.0 - 0.5 * (c.1 - 2.0 * z * c.2 + z * z * c.3);
            let best = coeffs.iter().map(term).fold(f64::NEG_INFINITY, f64::max);
            if best == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let sum: f64 = coeffs.iter().map(|c| (term(c) - best).exp()).sum();
            best + sum.ln()
        })
    }
}

impl ObservationModel for KalmanMixtureObs {
    fn state_dim(&self) -> usize {
        self.hs[0].ncols()
    }

    fn obs_dim(&self) -> usize {
        self.hs[0].nrows()
    }

    fn sample(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.pi.len() - 1;
        for (l, p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = l;
                break;
            }
        }
        sample_gaussian(&(&self.hs[idx] * z), &self.lambda_chols[idx], rng)
    }

    fn log_likelihood(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self
            .log_pi
            .iter()
            .zip(self.hs.iter().zip(&self.lambda_chols))
            .map(|(lp, (h, lam))| lp + log_density_prefactored(x, &(h * z), lam))
            .collect();
        log_sum_exp(&logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two_instance() -> KalmanMixtureObs {
        let h1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 0.8]);
        let h2 = DMatrix::from_row_slice(2, 2, &[-0.7, 0.2, 0.4, -1.0]);
        let l1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.6]);
        let l2 = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.2]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]);
        KalmanMixtureObs::new(&[0.4, 0.6], vec![h1, h2], vec![l1, l2], s).unwrap()
    }

    /// Dense midpoint quadrature of the posterior moments over a wide box.
    fn quadrature_moments(
        model: &KalmanMixtureObs,
        x: &DVector<f64>,
        half_width: f64,
        points: usize,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let prior_chol = chol_or_err(model.prior_covariance(), "prior").unwrap();
        let zero = DVector::zeros(2);
        let step = 2.0 * half_width / points as f64;
        let mut mass = 0.0;
        let mut mean = DVector::zeros(2);
        let mut second = DMatrix::zeros(2, 2);
        for i in 0..points {
            let z1 = -half_width + (i as f64 + 0.5) * step;
            for j in 0..points {
                let z2 = -half_width + (j as f64 + 0.5) * step;
                let z = DVector::from_row_slice(&[z1, z2]);
                let lw = log_density_prefactored(&z, &zero, &prior_chol)
                    + model.log_likelihood(x, &z);
                let w = lw.exp();
                mass += w;
                mean += &z * w;
                second += &z * z.transpose() * w;
            }
        }
        mean /= mass;
        second /= mass;
        let cov = second - &mean * mean.transpose();
        (mean, cov)
    }

    #[test]
    fn posterior_moments_match_quadrature() {
        let model = two_by_two_instance();
        for (k, xs) in [[0.9, -0.4], [2.0, 1.5], [-0.1, 0.0]].iter().enumerate() {
            let x = DVector::from_row_slice(xs);
            let exact = model.posterior_moments(&x).unwrap();
            let (qm, qc) = quadrature_moments(&model, &x, 8.0, 400);
            let dm = (&exact.mean - &qm).abs().max();
            let dc = (&exact.cov - &qc).abs().max();
            assert!(dm < 1e-4, "case {k}: mean off by {dm}");
            assert!(dc < 1e-4, "case {k}: cov off by {dc}");
            let total: f64 = exact.responsibilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_matches_joint_gaussian_conditioning() {
        // One component is plain linear-Gaussian, so the posterior must agree
        // with conditioning in the joint (z, x) Gaussian, computed the long
        // way round through the marginal observation covariance.
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.5, 1.1, 0.3, 0.3]);
        let lambda = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.4, 0.3, 0.5]));
        let s = DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 1.2]);
        let model =
            KalmanMixtureObs::new(&[1.0], vec![h.clone()], vec![lambda.clone()], s.clone())
                .unwrap();
        let x = DVector::from_row_slice(&[0.7, -0.2, 1.1]);
        let got = model.posterior_moments(&x).unwrap();
        let g = &h * &s * h.transpose() + &lambda;
        let g_inv = g.try_inverse().unwrap();
        let gain = &s * h.transpose() * g_inv;
        let want_mean = &gain * &x;
        let want_cov = &s - &gain * &h * &s;
        assert!((&got.mean - want_mean).abs().max() < 1e-10);
        assert!((&got.cov - want_cov).abs().max() < 1e-10);
    }

    #[test]
    fn sign_flip_pair_is_odd_in_the_observation() {
        let model = KalmanMixtureObs::zero_mean_pair(3, 8, 7).unwrap();
        let x = DVector::from_fn(8, |i, _| 0.3 * i as f64 - 1.0);
        let plus = model.posterior_moments(&x).unwrap();
        let minus = model.posterior_moments(&(-&x)).unwrap();
        // Negating x swaps the roles of the two components, so the posterior
        // mean flips sign and the covariance is unchanged.
        assert!((&plus.mean + &minus.mean).abs().max() < 1e-10);
        assert!((&plus.cov - &minus.cov).abs().max() < 1e-10);
    }

    #[test]
    fn scalar_sweep_agrees_with_generic_likelihood() {
        let model = KalmanMixtureObs::zero_mean_pair(1, 12, 3).unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for _ in 0..50 {
            let x = DVector::from_fn(12, |_, _| draw_standard_normal(&mut rng));
            let f = model.scalar_log_likelihood_fn(&x).unwrap();
            for &z in &[-2.0, -0.5, 0.0, 0.7, 1.9] {
                let want = model.log_likelihood(&x, &DVector::from_element(1, z));
                assert!((f(z) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_rebuilds_identical_instance() {
        let a = KalmanMixtureObs::zero_mean_pair(4, 6, 42).unwrap();
        let b = KalmanMixtureObs::zero_mean_pair(4, 6, 42).unwrap();
        assert_eq!(a.hs[0], b.hs[0]);
        let c = KalmanMixtureObs::zero_mean_pair(4, 6, 43).unwrap();
        assert_ne!(a.hs[0], c.hs[0]);
    }
}
