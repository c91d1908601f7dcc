//! Experiment configuration: schema, validation, and model construction.

use std::path::PathBuf;
use std::sync::Arc;

use dkf_core::dkf::{DiscriminativeModel, LinearDiscriminative};
use dkf_core::gaussian::LinearStateSpec;
use dkf_core::models::{
    BernoulliMixture1d, BernoulliMixtureObs, FloorObsModel, FloorStateModel, KalmanMixtureObs,
    LinearGaussianObs, ObservationModel, StateModel,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;

use crate::error::{BenchError, Result};

/// One filter to run, as named on the command line and in configs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterSpec {
    Kf,
    Ekf,
    Iekf,
    Ukf,
    /// Particle filter with the generative observation likelihood.
    Pf(usize),
    /// Particle filter reweighted by the discriminative density ratio.
    PfDkf(usize),
    DkfExact,
    DkfLearner,
    RobustDkf,
    HybridEkf,
    HybridUkf,
    Unfiltered,
}

impl FilterSpec {
    pub fn parse(token: &str) -> Result<Self> {
        let parse_count = |rest: &str, what: &str| -> Result<usize> {
            let n: usize = rest.parse().map_err(|_| {
                BenchError::Config(format!("{what} needs a particle count, got {rest:?}"))
            })?;
            if n == 0 {
                return Err(BenchError::Config(format!("{what} particle count must be positive")));
            }
            Ok(n)
        };
        match token {
            "kf" => Ok(FilterSpec::Kf),
            "ekf" => Ok(FilterSpec::Ekf),
            "iekf" => Ok(FilterSpec::Iekf),
            "ukf" => Ok(FilterSpec::Ukf),
            "dkf:exact" => Ok(FilterSpec::DkfExact),
            "dkf:learner" => Ok(FilterSpec::DkfLearner),
            "robust-dkf" => Ok(FilterSpec::RobustDkf),
            "hybrid-ekf" => Ok(FilterSpec::HybridEkf),
            "hybrid-ukf" => Ok(FilterSpec::HybridUkf),
            "unfiltered" => Ok(FilterSpec::Unfiltered),
            _ => {
                if let Some(rest) = token.strip_prefix("pf-dkf:") {
                    Ok(FilterSpec::PfDkf(parse_count(rest, "pf-dkf")?))
                } else if let Some(rest) = token.strip_prefix("pf:") {
                    Ok(FilterSpec::Pf(parse_count(rest, "pf")?))
                } else {
                    Err(BenchError::Config(format!(
                        "unknown filter {token:?}; expected kf, ekf, iekf, ukf, pf:N, \
                         pf-dkf:N, dkf:exact, dkf:learner, robust-dkf, hybrid-ekf, \
                         hybrid-ukf, or unfiltered"
                    )))
                }
            }
        }
    }

    /// Canonical name used in CSV rows and in per-trial seed derivation.
    pub fn name(&self) -> String {
        match self {
            FilterSpec::Kf => "kf".into(),
            FilterSpec::Ekf => "ekf".into(),
            FilterSpec::Iekf => "iekf".into(),
            FilterSpec::Ukf => "ukf".into(),
            FilterSpec::Pf(n) => format!("pf:{n}"),
            FilterSpec::PfDkf(n) => format!("pf-dkf:{n}"),
            FilterSpec::DkfExact => "dkf:exact".into(),
            FilterSpec::DkfLearner => "dkf:learner".into(),
            FilterSpec::RobustDkf => "robust-dkf".into(),
            FilterSpec::HybridEkf => "hybrid-ekf".into(),
            FilterSpec::HybridUkf => "hybrid-ukf".into(),
            FilterSpec::Unfiltered => "unfiltered".into(),
        }
    }

    /// True if this filter consumes discriminative moments `f, Q`.
    pub fn needs_moments(&self, moments: MomentsSource) -> bool {
        match self {
            FilterSpec::DkfLearner => true,
            FilterSpec::DkfExact => false,
            FilterSpec::PfDkf(_)
            | FilterSpec::RobustDkf
            | FilterSpec::HybridEkf
            | FilterSpec::HybridUkf
            | FilterSpec::Unfiltered => moments == MomentsSource::Learner,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentsSource {
    Exact,
    Learner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsSource {
    True,
    Fitted,
}

fn default_moments() -> String {
    "exact".into()
}

fn default_ut_alpha() -> f64 {
    1e-3
}

fn default_dynamics() -> String {
    "true".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub steps: usize,
    #[serde(default)]
    pub train_steps: usize,
    pub seeds: Vec<u64>,
    pub filters: Vec<String>,
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default = "default_moments")]
    pub moments: String,
    #[serde(default = "default_dynamics")]
    pub dynamics: String,
    /// Sigma-point spread for the unscented passes. The tiny default probes
    /// an almost infinitesimal neighborhood, which on piecewise-constant
    /// observation maps collapses the unscented update onto the extended
    /// one; widen it to let sigma points straddle the discontinuities.
    #[serde(default = "default_ut_alpha")]
    pub ut_alpha: f64,
    #[serde(default)]
    pub out: Option<String>,
}

fn default_shift_mode() -> String {
    "all".into()
}

fn default_second_noise() -> f64 {
    0.125
}

fn default_h_gain() -> f64 {
    1.0
}

fn default_burn_in() -> usize {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    #[serde(default)]
    pub state_dim: usize,
    #[serde(default)]
    pub obs_dim: usize,
    #[serde(default)]
    pub h_seed: u64,
    #[serde(default)]
    pub a_scale: f64,
    #[serde(default)]
    pub a_shift: f64,
    #[serde(default = "default_shift_mode")]
    pub a_shift_mode: String,
    /// Noise scale of the second mixture component relative to the first;
    /// one eighth reproduces the stock pair, one makes the components
    /// differ in sign only.
    #[serde(default = "default_second_noise")]
    pub second_noise_scale: f64,
    /// Multiplier on the drawn mixture gains, so sweeps can control how
    /// fast total observation information grows with the channel count.
    #[serde(default = "default_h_gain")]
    pub h_gain: f64,
    // Floor-model fields.
    #[serde(default)]
    pub sensors_per_dim: usize,
    #[serde(default)]
    pub offset_lo: f64,
    #[serde(default)]
    pub offset_hi: f64,
    #[serde(default)]
    pub gamma_scale: f64,
    #[serde(default)]
    pub lambda_scale: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    // Surrogate fields.
    #[serde(default)]
    pub features: usize,
    #[serde(default)]
    pub gain_hi: f64,
    #[serde(default)]
    pub gain_lo: f64,
    #[serde(default)]
    pub noise_std: f64,
    // Explicit linear model.
    #[serde(default)]
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub gamma: Vec<Vec<f64>>,
    #[serde(default)]
    pub h: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<Vec<f64>>,
}

fn default_hidden() -> usize {
    32
}

fn default_epochs() -> usize {
    4000
}

fn default_step() -> f64 {
    0.05
}

fn default_seven() -> usize {
    7
}

fn default_five() -> usize {
    5
}

fn default_bandwidths() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    pub kind: String,
    /// Covariance model: "smoothed" or "constant". Defaults to smoothed
    /// for the kernel-average regressor and constant for the rest.
    #[serde(default)]
    pub q: Option<String>,
    /// Deterministic stride subsample cap on fitting rows; zero keeps all.
    #[serde(default)]
    pub max_train_rows: usize,
    #[serde(default = "default_hidden")]
    pub hidden_width: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_seven")]
    pub f2_points: usize,
    #[serde(default = "default_seven")]
    pub l2_points: usize,
    #[serde(default = "default_five")]
    pub n2_points: usize,
    #[serde(default = "default_bandwidths")]
    pub bandwidth_points: usize,
    /// "octant" compresses the mean-fit rows to one averaged pair per
    /// 45-degree label sector before fitting; "none" keeps every row.
    #[serde(default = "default_sparsify")]
    pub sparsify: String,
}

fn default_sparsify() -> String {
    "none".to_owned()
}

impl LearnerSection {
    /// The covariance mode in effect: the explicit setting, else smoothed
    /// for "nw" and constant for everything else.
    pub fn q_mode(&self) -> &str {
        match &self.q {
            Some(q) => q,
            None if self.kind == "nw" => "smoothed",
            None => "constant",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    pub offsets: Vec<f64>,
    #[serde(default)]
    pub saturate_z: Option<f64>,
    #[serde(default)]
    pub inject_feature: usize,
}

fn default_grid_points() -> usize {
    2001
}

fn default_reps() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySection {
    pub obs_dims: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Optional per-rung gain multipliers, zipped with `obs_dims`; each
    /// entry replaces the model's `h_gain` for that rung.
    #[serde(default)]
    pub h_gains: Vec<f64>,
    /// Optional per-rung noise ratio for the second mixture component,
    /// zipped with `obs_dims`. Total component evidence is linear in the
    /// channel count at any fixed ratio, so a ladder that should stay
    /// measurable across a wide count range must soften the ratio as the
    /// count grows.
    #[serde(default)]
    pub second_noise_scales: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    #[serde(default)]
    pub learner: Option<LearnerSection>,
    #[serde(default)]
    pub robustness: Option<RobustnessSection>,
    #[serde(default)]
    pub consistency: Option<ConsistencySection>,
}

impl BenchConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::io(path.display().to_string(), e))?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text)
            .map_err(|e| BenchError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.steps == 0 {
            return Err(BenchError::Config("experiment.steps must be at least 1".into()));
        }
        if e.seeds.is_empty() {
            return Err(BenchError::Config("experiment.seeds must not be empty".into()));
        }
        if e.filters.is_empty() {
            return Err(BenchError::Config("experiment.filters must not be empty".into()));
        }
        for f in &e.filters {
            FilterSpec::parse(f)?;
        }
        for m in &e.metrics {
            if !matches!(m.as_str(), "rmse" | "normalized_rmse" | "angular") {
                return Err(BenchError::Config(format!(
                    "unknown metric {m:?}; expected rmse, normalized_rmse, or angular"
                )));
            }
        }
        self.moments_source()?;
        self.dynamics_source()?;
        if !(self.experiment.ut_alpha > 0.0) {
            return Err(BenchError::Config(
                "experiment.ut_alpha must be positive".into(),
            ));
        }
        if let Some(learner) = &self.learner {
            if !matches!(learner.kind.as_str(), "nw" | "gp" | "mk" | "mlp") {
                return Err(BenchError::Config(format!(
                    "unknown learner kind {:?}; expected nw, gp, mk, or mlp",
                    learner.kind
                )));
            }
            if !matches!(learner.sparsify.as_str(), "none" | "octant") {
                return Err(BenchError::Config(format!(
                    "unknown learner sparsify mode {:?}; expected none or octant",
                    learner.sparsify
                )));
            }
            let planar = self.model.state_dim == 2
                || (self.model.state_dim == 0 && self.model.kind == "neural_surrogate");
            if learner.sparsify == "octant" && !planar {
                return Err(BenchError::Config(
                    "octant sparsification needs a planar state (state_dim = 2)".into(),
                ));
            }
            if let Some(q) = &learner.q {
                if !matches!(q.as_str(), "smoothed" | "constant") {
                    return Err(BenchError::Config(format!(
                        "unknown learner q mode {q:?}; expected smoothed or constant"
                    )));
                }
            }
        }
        let needs_learner = self.moments_source()? == MomentsSource::Learner
            || e.filters.iter().any(|f| f == "dkf:learner");
        if needs_learner && self.learner.is_none() {
            return Err(BenchError::Config(
                "a [learner] section is required when learned moments are requested".into(),
            ));
        }
        let needs_train = needs_learner
            || self.dynamics_source()? == DynamicsSource::Fitted
            || !e.filters.is_empty();
        if needs_train && e.train_steps < 3 && self.requires_training() {
            return Err(BenchError::Config(
                "experiment.train_steps must be at least 3 for fitted components".into(),
            ));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Whether any configured piece is estimated from training data.
    pub fn requires_training(&self) -> bool {
        let learner_needed = self.experiment.filters.iter().any(|f| f == "dkf:learner")
            || self.moments_source().map(|m| m == MomentsSource::Learner).unwrap_or(false);
        let fitted_dynamics = self
            .dynamics_source()
            .map(|d| d == DynamicsSource::Fitted)
            .unwrap_or(false);
        let classic_linear = self.experiment.filters.iter().any(|f| {
            matches!(
                FilterSpec::parse(f),
                Ok(FilterSpec::Kf | FilterSpec::Ekf | FilterSpec::Iekf | FilterSpec::Ukf)
            )
        }) && !matches!(self.model.kind.as_str(), "floor" | "linear" | "neural_surrogate");
        let fitted_obs = self
            .experiment
            .filters
            .iter()
            .any(|f| matches!(FilterSpec::parse(f), Ok(FilterSpec::Kf)))
            && self.model.kind == "floor";
        learner_needed || fitted_dynamics || classic_linear || fitted_obs
    }

    pub fn moments_source(&self) -> Result<MomentsSource> {
        match self.experiment.moments.as_str() {
            "exact" => Ok(MomentsSource::Exact),
            "learner" => Ok(MomentsSource::Learner),
            other => Err(BenchError::Config(format!(
                "experiment.moments must be \"exact\" or \"learner\", got {other:?}"
            ))),
        }
    }

    pub fn dynamics_source(&self) -> Result<DynamicsSource> {
        match self.experiment.dynamics.as_str() {
            "true" => Ok(DynamicsSource::True),
            "fitted" => Ok(DynamicsSource::Fitted),
            other => Err(BenchError::Config(format!(
                "experiment.dynamics must be \"true\" or \"fitted\", got {other:?}"
            ))),
        }
    }

    pub fn filters(&self) -> Vec<FilterSpec> {
        self.experiment
            .filters
            .iter()
            .map(|f| FilterSpec::parse(f).expect("validated at load"))
            .collect()
    }

    pub fn out_path(&self) -> Option<PathBuf> {
        self.experiment.out.as_ref().map(PathBuf::from)
    }
}

/// The state-dynamics half of a built model.
pub enum StateKind {
    Linear(LinearStateSpec),
    Floor(FloorStateModel),
}

impl StateKind {
    pub fn as_dyn(&self) -> &dyn StateModel {
        match self {
            StateKind::Linear(s) => s,
            StateKind::Floor(s) => s,
        }
    }

    pub fn linear(&self) -> Option<&LinearStateSpec> {
        match self {
            StateKind::Linear(s) => Some(s),
            StateKind::Floor(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.as_dyn().dim()
    }
}

/// The observation half of a built model.
pub enum ObsKind {
    Linear(LinearGaussianObs),
    Mixture(KalmanMixtureObs),
    Bernoulli(BernoulliMixtureObs),
    Floor(FloorObsModel),
}

impl ObsKind {
    pub fn as_dyn(&self) -> &dyn ObservationModel {
        match self {
            ObsKind::Linear(o) => o,
            ObsKind::Mixture(o) => o,
            ObsKind::Bernoulli(o) => o,
            ObsKind::Floor(o) => o,
        }
    }
}

/// A fully constructed synthetic model plus its closed-form moments when
/// the family admits them.
pub struct BuiltModel {
    pub state: StateKind,
    pub obs: ObsKind,
    pub exact: Option<Arc<dyn DiscriminativeModel>>,
    pub kind: String,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(BenchError::Config(format!("model.{what} is missing")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(BenchError::Config(format!(
            "model.{what} rows must be non-empty and equally sized"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl ModelSection {
    fn validate(&self) -> Result<()> {
        match self.kind.as_str() {
            "kalman_mixture" | "bernoulli_mixture" | "floor" | "linear" | "neural_surrogate" => {
                Ok(())
            }
            other => Err(BenchError::Config(format!(
                "unknown model kind {other:?}; expected kalman_mixture, bernoulli_mixture, \
                 floor, linear, or neural_surrogate"
            ))),
        }
    }

    /// Transition matrix from the scale/shift description, with the shift
    /// applied to every entry or to off-diagonal entries only.
    fn shift_matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        let mut a = DMatrix::identity(d, d) * self.a_scale;
        match self.a_shift_mode.as_str() {
            "all" => {
                for v in a.iter_mut() {
                    *v += self.a_shift;
                }
            }
            "offdiag" => {
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            a[(i, j)] += self.a_shift;
                        }
                    }
                }
            }
            other => {
                return Err(BenchError::Config(format!(
                    "model.a_shift_mode must be \"all\" or \"offdiag\", got {other:?}"
                )))
            }
        }
        Ok(a)
    }

    pub fn build(&self) -> Result<BuiltModel> {
        self.build_variant(self.obs_dim, self.h_seed)
    }

    /// Builds the model with an overridden observation dimension and
    /// draw seed; used by the consistency sweep over observation counts.
    pub fn build_variant(&self, obs_dim: usize, h_seed: u64) -> Result<BuiltModel> {
        match self.kind.as_str() {
            "kalman_mixture" => {
                let d = self.state_dim;
                if d == 0 || obs_dim == 0 {
                    return Err(BenchError::Config(
                        "kalman_mixture needs state_dim and obs_dim".into(),
                    ));
                }
                if !(self.second_noise_scale > 0.0 && self.h_gain > 0.0) {
                    return Err(BenchError::Config(
                        "kalman_mixture needs positive second_noise_scale and h_gain".into(),
                    ));
                }
                let a = self.shift_matrix(d)?;
                let s = DMatrix::identity(d, d);
                let gamma = &s - &a * &s * a.transpose();
                let spec = LinearStateSpec::with_stationary(a, gamma, s)?;
                let obs = if self.second_noise_scale == 0.125 && self.h_gain == 1.0 {
                    KalmanMixtureObs::zero_mean_pair(d, obs_dim, h_seed)?
                } else {
                    use rand::SeedableRng;
                    use rand_distr::{Distribution, StandardNormal};
                    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(h_seed);
                    let h1 = DMatrix::from_fn(obs_dim, d, |_, _| {
                        let draw: f64 = StandardNormal.sample(&mut rng);
                        self.h_gain * draw
                    });
                    let h2 = -&h1;
                    let eye = DMatrix::identity(obs_dim, obs_dim);
                    KalmanMixtureObs::new(
                        &[0.5, 0.5],
                        vec![h1, h2],
                        vec![eye.clone(), eye * self.second_noise_scale],
                        DMatrix::identity(d, d),
                    )?
                };
                let exact: Arc<dyn DiscriminativeModel> = Arc::new(obs.clone());
                Ok(BuiltModel {
                    state: StateKind::Linear(spec),
                    obs: ObsKind::Mixture(obs),
                    exact: Some(exact),
                    kind: self.kind.clone(),
                })
            }
            "bernoulli_mixture" => {
                let d = self.state_dim;
                if d == 0 || obs_dim == 0 || obs_dim % d != 0 {
                    return Err(BenchError::Config(
                        "bernoulli_mixture needs obs_dim divisible by state_dim".into(),
                    ));
                }
                let a = self.shift_matrix(d)?;
                let s = DMatrix::identity(d, d);
                let gamma = &s - &a * &s * a.transpose();
                let spec = LinearStateSpec::with_stationary(a, gamma, s)?;
                let per_coord = BernoulliMixture1d::step_contrast_pair(obs_dim / d)?;
                let obs = BernoulliMixtureObs::new(per_coord, d)?;
                let exact: Arc<dyn DiscriminativeModel> = Arc::new(obs.clone());
                Ok(BuiltModel {
                    state: StateKind::Linear(spec),
                    obs: ObsKind::Bernoulli(obs),
                    exact: Some(exact),
                    kind: self.kind.clone(),
                })
            }
            "floor" => {
                let d = self.state_dim;
                if d == 0 || self.sensors_per_dim < 2 {
                    return Err(BenchError::Config(
                        "floor needs state_dim and at least two sensors per dimension".into(),
                    ));
                }
                if !(self.gamma_scale > 0.0 && self.lambda_scale > 0.0) {
                    return Err(BenchError::Config(
                        "floor needs positive gamma_scale and lambda_scale".into(),
                    ));
                }
                let a = DMatrix::identity(d, d) * self.a_scale;
                let gamma = DMatrix::identity(d, d) * self.gamma_scale;
                let state = FloorStateModel::new(a, gamma, self.burn_in)?;
                let m = self.sensors_per_dim * d;
                let lambda = DMatrix::identity(m, m) * self.lambda_scale;
                let obs = FloorObsModel::evenly_spaced(
                    d,
                    self.sensors_per_dim,
                    self.offset_lo,
                    self.offset_hi,
                    lambda,
                )?;
                Ok(BuiltModel {
                    state: StateKind::Floor(state),
                    obs: ObsKind::Floor(obs),
                    exact: None,
                    kind: self.kind.clone(),
                })
            }
            "linear" => {
                let a = matrix_from_rows(&self.a, "a")?;
                let gamma = matrix_from_rows(&self.gamma, "gamma")?;
                let h = matrix_from_rows(&self.h, "h")?;
                let lambda = matrix_from_rows(&self.lambda, "lambda")?;
                let b = if self.b.is_empty() {
                    DVector::zeros(h.nrows())
                } else {
                    DVector::from_row_slice(&self.b)
                };
                let spec = LinearStateSpec::new(a, gamma)?;
                let obs = LinearGaussianObs::new(h, b, lambda)?;
                let exact: Arc<dyn DiscriminativeModel> =
                    Arc::new(LinearDiscriminative::new(&spec, &obs)?);
                Ok(BuiltModel {
                    state: StateKind::Linear(spec),
                    obs: ObsKind::Linear(obs),
                    exact: Some(exact),
                    kind: self.kind.clone(),
                })
            }
            "neural_surrogate" => {
                let d = if self.state_dim == 0 { 2 } else { self.state_dim };
                let m = self.features;
                if m == 0 {
                    return Err(BenchError::Config("neural_surrogate needs features".into()));
                }
                if !(self.a_scale > 0.0 && self.a_scale < 1.0) {
                    return Err(BenchError::Config(
                        "neural_surrogate needs a_scale strictly inside (0, 1)".into(),
                    ));
                }
                if !(self.gain_hi >= self.gain_lo && self.gain_lo > 0.0) {
                    return Err(BenchError::Config(
                        "neural_surrogate needs gain_hi >= gain_lo > 0".into(),
                    ));
                }
                if !(self.noise_std > 0.0) {
                    return Err(BenchError::Config(
                        "neural_surrogate needs positive noise_std".into(),
                    ));
                }
                let a = DMatrix::identity(d, d) * self.a_scale;
                let s = DMatrix::identity(d, d);
                let gamma = DMatrix::identity(d, d) * (1.0 - self.a_scale * self.a_scale);
                let spec = LinearStateSpec::with_stationary(a, gamma, s)?;
                // Feature j reads the state along a random unit direction
                // with a gain that decays log-linearly in j, so feature 0
                // has the best signal-to-noise ratio by construction.
                let mut rng = ChaCha12Rng::seed_from_u64(h_seed);
                let mut h = DMatrix::zeros(m, d);
                for j in 0..m {
                    let t = if m == 1 { 0.0 } else { j as f64 / (m - 1) as f64 };
                    let gain = self.gain_hi * (self.gain_lo / self.gain_hi).powf(t);
                    let mut dir = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                    while dir.norm() < 1e-6 {
                        dir = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                    }
                    dir /= dir.norm();
                    for k in 0..d {
                        h[(j, k)] = gain * dir[k];
                    }
                }
                let lambda = DMatrix::identity(m, m) * (self.noise_std * self.noise_std);
                let obs = LinearGaussianObs::new(h, DVector::zeros(m), lambda)?;
                let exact: Arc<dyn DiscriminativeModel> =
                    Arc::new(LinearDiscriminative::new(&spec, &obs)?);
                Ok(BuiltModel {
                    state: StateKind::Linear(spec),
                    obs: ObsKind::Linear(obs),
                    exact: Some(exact),
                    kind: self.kind.clone(),
                })
            }
            other => Err(BenchError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [experiment]
        steps = 10
        seeds = [1]
        filters = ["kf"]

        [model]
        kind = "linear"
        a = [[0.5]]
        gamma = [[0.75]]
        h = [[1.0]]
        lambda = [[0.4]]
    "#;

    #[test]
    fn minimal_config_parses_and_builds() {
        let cfg = BenchConfig::from_str(MINIMAL).unwrap();
        let model = cfg.model.build().unwrap();
        assert_eq!(model.state.dim(), 1);
        assert!(model.exact.is_some());
        assert_eq!(cfg.filters(), vec![FilterSpec::Kf]);
    }

    #[test]
    fn filter_tokens_round_trip_through_their_names() {
        for token in [
            "kf", "ekf", "iekf", "ukf", "pf:500", "pf-dkf:250", "dkf:exact", "dkf:learner",
            "robust-dkf", "hybrid-ekf", "hybrid-ukf", "unfiltered",
        ] {
            let spec = FilterSpec::parse(token).unwrap();
            assert_eq!(spec.name(), token);
        }
        assert!(FilterSpec::parse("pf").is_err());
        assert!(FilterSpec::parse("pf:0").is_err());
        assert!(FilterSpec::parse("dkf").is_err());
        assert!(FilterSpec::parse("kalman").is_err());
    }

    #[test]
    fn unknown_fields_are_rejected_with_a_message() {
        let bad = MINIMAL.replace("steps = 10", "steps = 10\n        stepz = 3");
        let err = BenchConfig::from_str(&bad).unwrap_err();
        let text = format!("{err}");
        assert!(text.contains("stepz"), "message was {text}");
    }

    #[test]
    fn learner_filters_require_a_learner_section() {
        let bad = MINIMAL.replace("filters = [\"kf\"]", "filters = [\"dkf:learner\"]\n        train_steps = 100");
        let err = BenchConfig::from_str(&bad).unwrap_err();
        assert!(format!("{err}").contains("learner"));
    }

    #[test]
    fn mixture_shift_modes_produce_the_two_documented_matrices() {
        let section: ModelSection = toml::from_str(
            r#"
            kind = "kalman_mixture"
            state_dim = 3
            obs_dim = 4
            a_scale = 0.91
            a_shift = -0.1
            "#,
        )
        .unwrap();
        let all = section.shift_matrix(3).unwrap();
        assert!((all[(0, 0)] - 0.81).abs() < 1e-15);
        assert!((all[(0, 1)] - -0.1).abs() < 1e-15);

        let mut offdiag = section.clone();
        offdiag.a_shift_mode = "offdiag".into();
        let off = offdiag.shift_matrix(3).unwrap();
        assert!((off[(0, 0)] - 0.91).abs() < 1e-15);
        assert!((off[(0, 1)] - -0.1).abs() < 1e-15);
    }

    #[test]
    fn surrogate_gains_rank_feature_zero_highest() {
        let section: ModelSection = toml::from_str(
            r#"
            kind = "neural_surrogate"
            state_dim = 2
            features = 40
            h_seed = 5
            a_scale = 0.97
            gain_hi = 1.5
            gain_lo = 0.05
            noise_std = 1.0
            "#,
        )
        .unwrap();
        let model = section.build().unwrap();
        let ObsKind::Linear(obs) = &model.obs else {
            panic!("surrogate must build a linear observation model");
        };
        let norms: Vec<f64> = (0..40).map(|j| obs.h().row(j).norm()).collect();
        assert!((norms[0] - 1.5).abs() < 1e-12);
        assert!((norms[39] - 0.05).abs() < 1e-12);
        for j in 1..40 {
            assert!(norms[j] < norms[j - 1]);
        }
    }
}
