//! The discriminative Kalman filter step, its robust variant, and hybrid
//! variants for nonlinear state dynamics.
//!
//! Instead of a generative observation likelihood, these filters consume a
//! [`DiscriminativeModel`]: a map taking each observation to the mean and
//! covariance of a Gaussian approximation of `p(state | observation)`. The
//! measurement update combines those moments with the predicted belief in
//! information form, and subtracts the stationary prior so it is not counted
//! twice. When that subtraction would destroy positive definiteness, the
//! step falls back to an update without the subtraction and reports it.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::filters::{predict_linear, predict_linearized, predict_unscented, UtConfig};
use crate::gaussian::{GaussianBelief, LinearStateSpec};
use crate::linalg::{check_pd, chol_or_err, symmetrize, CholFactor, DEFAULT_PD_TOL};
use crate::models::{BernoulliMixtureObs, KalmanMixtureObs, LinearGaussianObs, StateModel};

/// Per-observation conditional moments of the state.
///
/// `moments(x)` returns the mean and covariance of a Gaussian approximation
/// of the state posterior given the single observation `x` under the
/// stationary prior. Implementations must be safe to call concurrently;
/// learned models are frozen after fitting.
pub trait DiscriminativeModel: Send + Sync {
    fn moments(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

/// Outcome of one discriminative filter step.
#[derive(Debug, Clone)]
pub struct DkfStepReport {
    pub belief: GaussianBelief,
    /// True when the prior-subtracted information matrix was not positive
    /// definite and the step used the no-subtraction update instead.
    pub used_robust_fallback: bool,
}

/// The discriminative measurement update in information form.
///
/// Given the predicted belief, the conditional moments `(f, q)` for the
/// current observation, and optionally the inverse stationary covariance,
/// computes
///
/// ```text
/// cov  = (q^-1 + M^-1 - S^-1)^-1
/// mean = cov (q^-1 f + M^-1 nu)
/// ```
///
/// where `(nu, M)` is the prediction. If the bracketed information matrix is
/// not positive definite, or `s_inv` is `None`, the `S^-1` term is omitted;
/// the returned flag is true exactly when an omission was forced rather than
/// requested. The no-subtraction form is always well posed because it sums
/// two positive definite precisions.
pub fn dkf_update(
    pred: &GaussianBelief,
    f: &DVector<f64>,
    q: &DMatrix<f64>,
    s_inv: Option<&DMatrix<f64>>,
) -> Result<(GaussianBelief, bool)> {
    let d = pred.dim();
    if f.len() != d || q.nrows() != d || q.ncols() != d {
        return Err(CoreError::DimensionMismatch {
            context: "discriminative moments",
            expected: d,
            got: f.len(),
        });
    }
    let q_sym = symmetrize(q);
    let q_chol = CholFactor::new(&q_sym, DEFAULT_PD_TOL).ok_or(CoreError::NotPositiveDefinite {
        what: "discriminative covariance",
    })?;
    let q_inv = q_chol.inverse();
    let m_chol = chol_or_err(pred.cov(), "predicted covariance")?;
    let m_inv = m_chol.inverse();
    let info_robust = symmetrize(&(&q_inv + &m_inv));
    let (info, used_fallback) = match s_inv {
        Some(si) => {
            let exact = symmetrize(&(&info_robust - si));
            if check_pd(&exact, DEFAULT_PD_TOL) {
                (exact, false)
            } else {
                (info_robust, true)
            }
        }
        None => (info_robust, false),
    };
    let info_chol = chol_or_err(&info, "posterior information")?;
    let cov = info_chol.inverse();
    let mean = &cov * (&q_inv * f + &m_inv * pred.mean());
    Ok((GaussianBelief::new(mean, cov)?, used_fallback))
}

/// One exact discriminative step on linear-Gaussian dynamics: linear
/// prediction, then [`dkf_update`] with the stationary prior subtracted.
pub fn dkf_step(
    belief: &GaussianBelief,
    state: &LinearStateSpec,
    dm: &dyn DiscriminativeModel,
    x: &DVector<f64>,
) -> Result<DkfStepReport> {
    let pred = predict_linear(belief, state.a(), state.gamma())?;
    let (f, q) = dm.moments(x)?;
    let (belief, used_robust_fallback) = dkf_update(&pred, &f, &q, Some(state.s_inv()))?;
    Ok(DkfStepReport {
        belief,
        used_robust_fallback,
    })
}

/// One robust discriminative step: never subtracts the stationary prior.
///
/// With `prev = None` this is the first step and the belief is exactly the
/// conditional moments `(f(x), q(x))`. The recursion never reads the
/// stationary covariance, so its output is unchanged under any rescaling of
/// the prior.
pub fn robust_dkf_step(
    prev: Option<&GaussianBelief>,
    state: &LinearStateSpec,
    dm: &dyn DiscriminativeModel,
    x: &DVector<f64>,
) -> Result<GaussianBelief> {
    let (f, q) = dm.moments(x)?;
    match prev {
        None => GaussianBelief::new(f, q),
        Some(belief) => {
            let pred = predict_linear(belief, state.a(), state.gamma())?;
            Ok(dkf_update(&pred, &f, &q, None)?.0)
        }
    }
}

/// How a hybrid step propagates the belief through nonlinear dynamics.
#[derive(Debug, Clone, Copy)]
pub enum HybridPrediction {
    /// Jacobian linearization at the current mean.
    Linearized,
    /// Unscented transform with the given sigma-point configuration.
    Unscented(UtConfig),
}

/// One discriminative step on nonlinear dynamics.
///
/// The prediction comes from the chosen propagation of the state model; the
/// measurement update is identical to [`dkf_step`] with the predicted
/// covariance in place of `M` and `s_approx` in place of the stationary
/// covariance, including the robust fallback rule. `s_approx` is typically
/// the empirical covariance of a long free run of the dynamics.
pub fn hybrid_step(
    belief: &GaussianBelief,
    state: &dyn StateModel,
    prediction: HybridPrediction,
    dm: &dyn DiscriminativeModel,
    s_approx: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DkfStepReport> {
    let pred = match prediction {
        HybridPrediction::Linearized => predict_linearized(belief, state)?,
        HybridPrediction::Unscented(cfg) => predict_unscented(belief, state, &cfg)?,
    };
    let s_chol = chol_or_err(&symmetrize(s_approx), "stationary covariance estimate")?;
    let s_inv = s_chol.inverse();
    let (f, q) = dm.moments(x)?;
    let (belief, used_robust_fallback) = dkf_update(&pred, &f, &q, Some(&s_inv))?;
    Ok(DkfStepReport {
        belief,
        used_robust_fallback,
    })
}

/// Which discriminative recursion [`dkf_filter`] folds over the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearDkfVariant {
    /// Prior-subtracting update started from the stationary prior.
    Exact,
    /// No-subtraction update started from the first observation's moments.
    Robust,
}

/// A filtering pass: one belief per observation row, plus which steps fell
/// back to the robust update.
#[derive(Debug, Clone)]
pub struct DkfRun {
    pub beliefs: Vec<GaussianBelief>,
    pub fallback_flags: Vec<bool>,
}

impl DkfRun {
    pub fn fallback_count(&self) -> usize {
        self.fallback_flags.iter().filter(|f| **f).count()
    }

    fn push(&mut self, belief: GaussianBelief, fallback: bool) {
        self.beliefs.push(belief);
        self.fallback_flags.push(fallback);
    }

    fn with_capacity(steps: usize) -> Self {
        Self {
            beliefs: Vec::with_capacity(steps),
            fallback_flags: Vec::with_capacity(steps),
        }
    }
}

/// Runs a discriminative filter over observation rows on linear-Gaussian
/// dynamics. Row `t` of `observations` is the observation at step `t`.
pub fn dkf_filter(
    observations: &DMatrix<f64>,
    state: &LinearStateSpec,
    dm: &dyn DiscriminativeModel,
    variant: LinearDkfVariant,
) -> Result<DkfRun> {
    let steps = observations.nrows();
    if steps == 0 {
        return Err(CoreError::InvalidArgument(
            "need at least one observation to filter".into(),
        ));
    }
    let mut run = DkfRun::with_capacity(steps);
    match variant {
        LinearDkfVariant::Exact => {
            let mut belief = GaussianBelief::prior(state.s())?;
            for t in 0..steps {
                let x = observations.row(t).transpose();
                let report = dkf_step(&belief, state, dm, &x)?;
                belief = report.belief.clone();
                run.push(report.belief, report.used_robust_fallback);
            }
        }
        LinearDkfVariant::Robust => {
            let mut prev: Option<GaussianBelief> = None;
            for t in 0..steps {
                let x = observations.row(t).transpose();
                let belief = robust_dkf_step(prev.as_ref(), state, dm, &x)?;
                prev = Some(belief.clone());
                run.push(belief, false);
            }
        }
    }
    Ok(run)
}

/// Runs the hybrid discriminative filter over observation rows on nonlinear
/// dynamics, starting from the belief `N(0, s_approx)`.
pub fn hybrid_filter(
    observations: &DMatrix<f64>,
    state: &dyn StateModel,
    prediction: HybridPrediction,
    dm: &dyn DiscriminativeModel,
    s_approx: &DMatrix<f64>,
) -> Result<DkfRun> {
    let steps = observations.nrows();
    if steps == 0 {
        return Err(CoreError::InvalidArgument(
            "need at least one observation to filter".into(),
        ));
    }
    let mut run = DkfRun::with_capacity(steps);
    let mut belief = GaussianBelief::prior(s_approx)?;
    for t in 0..steps {
        let x = observations.row(t).transpose();
        let report = hybrid_step(&belief, state, prediction, dm, s_approx, &x)?;
        belief = report.belief.clone();
        run.push(report.belief, report.used_robust_fallback);
    }
    Ok(run)
}

/// Closed-form conditional moments for a linear-Gaussian observation model
/// under the stationary prior.
///
/// `f(x) = (S^-1 + H^T L^-1 H)^-1 H^T L^-1 (x - b)` with the matching
/// constant covariance. Feeding these moments to the exact discriminative
/// step reproduces the Kalman filter trace, which makes this the standard
/// correctness anchor for the discriminative recursion.
#[derive(Debug, Clone)]
pub struct LinearDiscriminative {
    coeff: DMatrix<f64>,
    bias: DVector<f64>,
    q: DMatrix<f64>,
}

impl LinearDiscriminative {
    pub fn new(state: &LinearStateSpec, obs: &LinearGaussianObs) -> Result<Self> {
        if obs.h().ncols() != state.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "observation matrix columns",
                expected: state.dim(),
                got: obs.h().ncols(),
            });
        }
        let lam_chol = chol_or_err(obs.lambda(), "observation noise")?;
        // H^T Lambda^-1 as (Lambda^-1 H)^T.
        let ht_lam_inv = lam_chol.solve_mat(obs.h()).transpose();
        let precision = symmetrize(&(state.s_inv() + &ht_lam_inv * obs.h()));
        let prec_chol = chol_or_err(&precision, "conditional precision")?;
        let q = prec_chol.inverse();
        let coeff = &q * &ht_lam_inv;
        Ok(Self {
            coeff,
            bias: obs.bias().clone(),
            q,
        })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
}

impl DiscriminativeModel for LinearDiscriminative {
    fn moments(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if x.len() != self.coeff.ncols() {
            return Err(CoreError::DimensionMismatch {
                context: "observation length",
                expected: self.coeff.ncols(),
                got: x.len(),
            });
        }
        Ok((&self.coeff * (x - &self.bias), self.q.clone()))
    }
}

impl DiscriminativeModel for KalmanMixtureObs {
    fn moments(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mm = self.posterior_moments(x)?;
        Ok((mm.mean, mm.cov))
    }
}

impl DiscriminativeModel for BernoulliMixtureObs {
    fn moments(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.posterior_moments(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::kf_update;
    use crate::models::simulate;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Observation-independent moments, handy for pinning the update algebra.
    struct ConstMoments {
        f: DVector<f64>,
        q: DMatrix<f64>,
    }

    impl DiscriminativeModel for ConstMoments {
        fn moments(&self, _x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
            Ok((self.f.clone(), self.q.clone()))
        }
    }

    fn scalar_spec() -> LinearStateSpec {
        LinearStateSpec::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.75),
        )
        .unwrap()
    }

    #[test]
    fn scalar_exact_step_matches_direct_formulas() {
        let spec = scalar_spec();
        assert!((spec.s()[(0, 0)] - 1.0).abs() < 1e-10);
        let belief = GaussianBelief::prior(spec.s()).unwrap();
        let dm = ConstMoments {
            f: DVector::from_element(1, 0.8),
            q: DMatrix::from_element(1, 1, 0.2),
        };
        let report = dkf_step(&belief, &spec, &dm, &DVector::zeros(1)).unwrap();
        assert!(!report.used_robust_fallback);

        // Scalar arithmetic oracle, independent of the matrix code path.
        let m: f64 = 0.5 * 1.0 * 0.5 + 0.75;
        assert!((m - 1.0).abs() < 1e-12);
        let sigma: f64 = 1.0 / (1.0 / 0.2 + 1.0 / m - 1.0);
        let mu: f64 = sigma * (0.8 / 0.2 + 0.5 * 0.0 / m);
        assert!((sigma - 0.2).abs() < 1e-12);
        assert!((mu - 0.8).abs() < 1e-12);
        assert!((report.belief.cov()[(0, 0)] - sigma).abs() < 1e-12);
        assert!((report.belief.mean()[0] - mu).abs() < 1e-12);
    }

    #[test]
    fn scalar_robust_step_matches_direct_formulas() {
        let spec = scalar_spec();
        let belief = GaussianBelief::prior(spec.s()).unwrap();
        let dm = ConstMoments {
            f: DVector::from_element(1, 0.8),
            q: DMatrix::from_element(1, 1, 0.2),
        };
        let post = robust_dkf_step(Some(&belief), &spec, &dm, &DVector::zeros(1)).unwrap();
        // Without the prior subtraction: sigma = (5 + 1)^-1, mu = sigma * 4.
        let sigma: f64 = 1.0 / (1.0 / 0.2 + 1.0);
        let mu: f64 = sigma * (0.8 / 0.2);
        assert!((sigma - 1.0 / 6.0).abs() < 1e-15);
        assert!((mu - 2.0 / 3.0).abs() < 1e-15);
        assert!((post.cov()[(0, 0)] - sigma).abs() < 1e-12);
        assert!((post.mean()[0] - mu).abs() < 1e-12);
        assert!((post.mean()[0] - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn robust_first_step_returns_the_plain_moments() {
        let spec = scalar_spec();
        let dm = ConstMoments {
            f: DVector::from_element(1, -0.3),
            q: DMatrix::from_element(1, 1, 0.7),
        };
        let post = robust_dkf_step(None, &spec, &dm, &DVector::zeros(1)).unwrap();
        assert_eq!(post.mean()[0], -0.3);
        assert_eq!(post.cov()[(0, 0)], 0.7);
    }

    #[test]
    fn robust_filter_with_one_observation_is_the_first_step_rule() {
        let spec = scalar_spec();
        let dm = ConstMoments {
            f: DVector::from_element(1, 0.4),
            q: DMatrix::from_element(1, 1, 0.5),
        };
        let run = dkf_filter(
            &DMatrix::zeros(1, 1),
            &spec,
            &dm,
            LinearDkfVariant::Robust,
        )
        .unwrap();
        assert_eq!(run.beliefs.len(), 1);
        assert_eq!(run.beliefs[0].mean()[0], 0.4);
        assert_eq!(run.fallback_count(), 0);
    }

    fn random_spec(dim: usize, rng: &mut ChaCha12Rng) -> LinearStateSpec {
        loop {
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() * 0.6 - 0.3);
            let g = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
            let gamma = &g * g.transpose() + DMatrix::identity(dim, dim) * 0.3;
            if let Ok(spec) = LinearStateSpec::new(a, gamma) {
                return spec;
            }
        }
    }

    fn random_obs(state_dim: usize, obs_dim: usize, rng: &mut ChaCha12Rng) -> LinearGaussianObs {
        let h = DMatrix::from_fn(obs_dim, state_dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let b = DVector::from_fn(obs_dim, |_, _| rng.random::<f64>() - 0.5);
        let l = DMatrix::from_fn(obs_dim, obs_dim, |_, _| rng.random::<f64>() - 0.5);
        let lambda = &l * l.transpose() + DMatrix::identity(obs_dim, obs_dim) * 0.2;
        LinearGaussianObs::new(h, b, lambda).unwrap()
    }

    #[test]
    fn closed_form_moments_reproduce_the_kalman_trace() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let spec = random_spec(2, &mut rng);
        let obs = random_obs(2, 3, &mut rng);
        let dm = LinearDiscriminative::new(&spec, &obs).unwrap();
        let traj = simulate(&spec, &obs, 100, 9).unwrap();
        let run = dkf_filter(&traj.observations, &spec, &dm, LinearDkfVariant::Exact).unwrap();
        assert_eq!(run.fallback_count(), 0);

        let mut kf = GaussianBelief::prior(spec.s()).unwrap();
        for t in 0..traj.len() {
            if t > 0 {
                kf = predict_linear(&kf, spec.a(), spec.gamma()).unwrap();
            }
            kf = kf_update(&kf, &obs, &traj.observation_at(t)).unwrap();
            let dev_mean = (run.beliefs[t].mean() - kf.mean()).abs().max();
            let dev_cov = (run.beliefs[t].cov() - kf.cov()).abs().max();
            assert!(dev_mean < 1e-9, "step {t} mean deviation {dev_mean}");
            assert!(dev_cov < 1e-9, "step {t} covariance deviation {dev_cov}");
        }
    }

    fn wide_belief_spec_2d() -> (LinearStateSpec, GaussianBelief) {
        let spec = LinearStateSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.05, 0.0, 0.85]),
            DMatrix::identity(2, 2) * 0.2,
        )
        .unwrap();
        let wide = GaussianBelief::new(DVector::zeros(2), spec.s() * 10.0).unwrap();
        (spec, wide)
    }

    #[test]
    fn lost_positive_definiteness_triggers_the_fallback() {
        // A conditional covariance twice the prior plus a belief much wider
        // than stationary makes the prior subtraction indefinite.
        let (spec, wide) = wide_belief_spec_2d();
        let dm = ConstMoments {
            f: DVector::from_row_slice(&[0.3, -0.4]),
            q: spec.s() * 2.0,
        };
        let x = DVector::zeros(2);
        let report = dkf_step(&wide, &spec, &dm, &x).unwrap();
        assert!(report.used_robust_fallback);
        let robust = robust_dkf_step(Some(&wide), &spec, &dm, &x).unwrap();
        assert_eq!(report.belief.mean(), robust.mean());
        assert_eq!(report.belief.cov(), robust.cov());
    }

    #[test]
    fn fallback_path_ignores_the_prior_scale() {
        // Once the update falls back, the stationary covariance is out of
        // the formula entirely, so scaling it must not move the output.
        let (spec, wide) = wide_belief_spec_2d();
        let dm = ConstMoments {
            f: DVector::from_row_slice(&[0.1, 0.2]),
            q: spec.s() * 1000.0,
        };
        let wider = GaussianBelief::new(DVector::zeros(2), spec.s() * 1000.0).unwrap();
        let x = DVector::zeros(2);
        let small = hybrid_step(
            &wider,
            &spec,
            HybridPrediction::Linearized,
            &dm,
            spec.s(),
            &x,
        )
        .unwrap();
        let large = hybrid_step(
            &wider,
            &spec,
            HybridPrediction::Linearized,
            &dm,
            &(spec.s() * 100.0),
            &x,
        )
        .unwrap();
        assert!(small.used_robust_fallback);
        assert!(large.used_robust_fallback);
        assert_eq!(small.belief.mean(), large.belief.mean());
        assert_eq!(small.belief.cov(), large.belief.cov());
        drop(wide);
    }

    #[test]
    fn vanishing_prior_precision_approaches_the_robust_update() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let spec = random_spec(2, &mut rng);
        let pred = GaussianBelief::new(
            DVector::from_row_slice(&[0.2, -0.1]),
            spec.s().clone(),
        )
        .unwrap();
        let f = DVector::from_row_slice(&[0.5, 0.1]);
        let q = spec.s() * 0.4;
        let tiny = spec.s().clone().try_inverse().unwrap() * 1e-8;
        let (scaled, flag) = dkf_update(&pred, &f, &q, Some(&tiny)).unwrap();
        assert!(!flag);
        let (robust, _) = dkf_update(&pred, &f, &q, None).unwrap();
        assert!((scaled.mean() - robust.mean()).abs().max() < 1e-6);
        assert!((scaled.cov() - robust.cov()).abs().max() < 1e-6);
    }

    #[test]
    fn hybrid_step_on_linear_dynamics_equals_the_exact_step() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let spec = random_spec(3, &mut rng);
        let belief = GaussianBelief::new(
            DVector::from_row_slice(&[0.4, -0.2, 0.1]),
            spec.s() * 0.7,
        )
        .unwrap();
        let dm = ConstMoments {
            f: DVector::from_row_slice(&[0.3, 0.0, -0.5]),
            q: spec.s() * 0.5,
        };
        let x = DVector::zeros(3);
        let exact = dkf_step(&belief, &spec, &dm, &x).unwrap();
        let lin = hybrid_step(
            &belief,
            &spec,
            HybridPrediction::Linearized,
            &dm,
            spec.s(),
            &x,
        )
        .unwrap();
        assert!((lin.belief.mean() - exact.belief.mean()).abs().max() < 1e-13);
        assert!((lin.belief.cov() - exact.belief.cov()).abs().max() < 1e-13);
        let ut = hybrid_step(
            &belief,
            &spec,
            HybridPrediction::Unscented(UtConfig::default()),
            &dm,
            spec.s(),
            &x,
        )
        .unwrap();
        assert!((ut.belief.mean() - exact.belief.mean()).abs().max() < 1e-8);
        assert!((ut.belief.cov() - exact.belief.cov()).abs().max() < 1e-8);
    }

    #[test]
    fn robust_scalar_update_never_exceeds_either_information_source() {
        // Harmonic-sum inequality: the robust posterior variance is below
        // both the predicted variance and the conditional variance.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..200 {
            let a = rng.random::<f64>() * 1.8 - 0.9;
            let gamma = rng.random::<f64>() * 2.0 + 0.05;
            let spec = LinearStateSpec::new(
                DMatrix::from_element(1, 1, a),
                DMatrix::from_element(1, 1, gamma),
            )
            .unwrap();
            let prev_var = rng.random::<f64>() * 3.0 + 0.05;
            let prev = GaussianBelief::new(
                DVector::from_element(1, rng.random::<f64>() - 0.5),
                DMatrix::from_element(1, 1, prev_var),
            )
            .unwrap();
            let q = rng.random::<f64>() * 3.0 + 0.05;
            let dm = ConstMoments {
                f: DVector::from_element(1, rng.random::<f64>() - 0.5),
                q: DMatrix::from_element(1, 1, q),
            };
            let post = robust_dkf_step(Some(&prev), &spec, &dm, &DVector::zeros(1)).unwrap();
            let m = a * prev_var * a + gamma;
            let var = post.cov()[(0, 0)];
            assert!(var <= m + 1e-12, "variance {var} above predicted {m}");
            assert!(var <= q + 1e-12, "variance {var} above conditional {q}");
        }
    }

    #[test]
    fn mixture_moments_rarely_need_the_fallback() {
        let dim = 10;
        let spec = LinearStateSpec::new(
            DMatrix::identity(dim, dim) * 0.81,
            DMatrix::identity(dim, dim) * (1.0 - 0.81 * 0.81),
        )
        .unwrap();
        let obs = KalmanMixtureObs::zero_mean_pair(dim, 100, 61).unwrap();
        let traj = simulate(&spec, &obs, 300, 62).unwrap();
        let run = dkf_filter(&traj.observations, &spec, &obs, LinearDkfVariant::Exact).unwrap();
        let limit = traj.len() / 20;
        assert!(
            run.fallback_count() <= limit,
            "{} fallbacks in {} steps",
            run.fallback_count(),
            traj.len()
        );
    }

    #[test]
    fn non_positive_conditional_covariance_is_rejected() {
        let spec = scalar_spec();
        let belief = GaussianBelief::prior(spec.s()).unwrap();
        let dm = ConstMoments {
            f: DVector::zeros(1),
            q: DMatrix::from_element(1, 1, -0.5),
        };
        let err = dkf_step(&belief, &spec, &dm, &DVector::zeros(1)).unwrap_err();
        assert!(matches!(
            err,
            CoreError::NotPositiveDefinite {
                what: "discriminative covariance"
            }
        ));
    }
}
