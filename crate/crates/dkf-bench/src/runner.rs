//! Experiment execution: per-seed data preparation, filter adapters, and
//! the threaded trial loop behind the bench, robustness, and consistency
//! subcommands.
//!
//! Every trial gets its own ChaCha stream derived from the trial seed, the
//! seed's position in the config, and the filter's canonical name, so runs
//! are reproducible under any thread count and adding a filter never
//! perturbs the others.

use std::sync::Arc;
use std::time::Instant;

use dkf_core::dkf::{
    dkf_filter, hybrid_filter, DiscriminativeModel, HybridPrediction, LinearDkfVariant,
};
use dkf_core::filters::{
    grid_init, grid_step, iekf_update, kf_update, predict_linear, predict_linearized,
    predict_unscented, ukf_update, Grid1d, GridPosterior, GridTransition, NonlinearObs,
    ParticleEnsemble, UtConfig,
};
use dkf_core::gaussian::{log_density_prefactored, GaussianBelief, LinearStateSpec};
use dkf_core::learn::{
    fit_linear_observation, fit_q_residuals, fit_state_dynamics, gp_fit, median_pairwise_distance,
    mlp_fit, nw_fit, sparsify_octants, FittedMoments, HyperTriple, KernelFamily, MeanRegressor,
    QModel, SupervisedSet,
};
use dkf_core::linalg::{chol_or_err, symmetrize};
use dkf_core::models::{simulate, LinearGaussianObs, StateModel, Trajectory};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::{
    BenchConfig, BuiltModel, DynamicsSource, FilterSpec, LearnerSection, MomentsSource, ObsKind,
};
use crate::csvio::{belief_header, fmt_f64};
use crate::error::{BenchError, Result};
use crate::metrics::{self, FeatureStats};
use crate::model_file::FittedModelFile;

/// Training trajectories reuse the trial seed through a fixed xor so the
/// train and test streams never collide.
pub const TRAIN_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;

/// FNV-1a over the seed value, its index, and the filter name. The result
/// seeds the per-trial generator.
pub fn trial_seed(seed: u64, seed_index: usize, filter_name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x1000_0000_01b3;
    let mut h = OFFSET;
    let eat = |h: u64, byte: u8| (h ^ byte as u64).wrapping_mul(PRIME);
    for b in seed.to_le_bytes() {
        h = eat(h, b);
    }
    for b in (seed_index as u64).to_le_bytes() {
        h = eat(h, b);
    }
    for &b in filter_name.as_bytes() {
        h = eat(h, b);
    }
    h
}

/// Runs `f` over `0..count` on up to `threads` scoped workers, returning
/// results in index order.
pub fn parallel_map<T, F>(count: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = threads.max(1).min(count.max(1));
    if workers <= 1 {
        return (0..count).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for tid in 0..workers {
            let f = &f;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut k = tid;
                while k < count {
                    out.push((k, f(k)));
                    k += workers;
                }
                out
            }));
        }
        for handle in handles {
            for (k, value) in handle.join().expect("trial worker panicked") {
                slots[k] = Some(value);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every index is assigned to exactly one worker"))
        .collect()
}

/// Everything estimated from one training trajectory.
pub struct FittedContext {
    pub moments: Option<FittedMoments>,
    pub linear_obs: Option<LinearGaussianObs>,
    pub dynamics: Option<LinearStateSpec>,
    pub s_approx: DMatrix<f64>,
    pub stats: FeatureStats,
}

/// Per-seed inputs for every filter: the test trajectory and, when the
/// config calls for training, the shared fitted pieces.
pub struct SeedData {
    pub test: Trajectory,
    pub fitted: Option<Arc<FittedContext>>,
}

/// Which fitted pieces the configured filters actually need.
#[derive(Debug, Clone, Copy)]
pub struct FitPlan {
    pub learner: bool,
    pub linear_obs: bool,
    pub dynamics: bool,
}

pub fn fit_plan(cfg: &BenchConfig) -> Result<FitPlan> {
    let filters = cfg.filters();
    let moments = cfg.moments_source()?;
    let learner = filters.iter().any(|f| f.needs_moments(moments));
    let dynamics = cfg.dynamics_source()? == DynamicsSource::Fitted;
    let kind = cfg.model.kind.as_str();
    // Observations that are already linear are used directly; the floor
    // model keeps its true nonlinear map for the linearizing filters, so
    // only the plain Kalman filter needs a surrogate there.
    let linear_obs = match kind {
        "linear" | "neural_surrogate" => false,
        "floor" => filters.iter().any(|f| matches!(f, FilterSpec::Kf)),
        _ => filters.iter().any(|f| {
            matches!(
                f,
                FilterSpec::Kf | FilterSpec::Ekf | FilterSpec::Iekf | FilterSpec::Ukf
            )
        }),
    };
    Ok(FitPlan {
        learner,
        linear_obs,
        dynamics,
    })
}

fn mean_variance(zs: &DMatrix<f64>) -> f64 {
    let m = zs.nrows() as f64;
    let mut total = 0.0;
    for j in 0..zs.ncols() {
        let col = zs.column(j);
        let mean = col.sum() / m;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    }
    (total / zs.ncols() as f64).max(f64::MIN_POSITIVE)
}

/// Population covariance of trajectory states with a small proportional
/// ridge so downstream factorizations never see a flat direction.
pub fn sample_covariance(states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = states.nrows();
    let d = states.ncols();
    if t < d + 1 {
        return Err(BenchError::Config(format!(
            "need more than {d} training rows to estimate a {d}-dimensional covariance, got {t}"
        )));
    }
    let tf = t as f64;
    let means = DVector::from_fn(d, |j, _| states.column(j).sum() / tf);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..t {
        let dv = DVector::from_fn(d, |j, _| states[(i, j)] - means[j]);
        cov += &dv * dv.transpose();
    }
    cov /= tf;
    let ridge = 1e-9 * cov.trace().max(f64::MIN_POSITIVE) / d as f64;
    for j in 0..d {
        cov[(j, j)] += ridge;
    }
    Ok(cov)
}

fn logspace(base: f64, lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![base * 10f64.powf(0.5 * (lo + hi))];
    }
    (0..count)
        .map(|k| {
            let t = k as f64 / (count - 1) as f64;
            base * 10f64.powf(lo + (hi - lo) * t)
        })
        .collect()
}

fn bandwidth_grid(data: &SupervisedSet, count: usize) -> Vec<f64> {
    logspace(median_pairwise_distance(data.xs()), -2.0, 2.0, count.max(2))
}

fn hyper_grid(data: &SupervisedSet, lc: &LearnerSection) -> Vec<HyperTriple> {
    let var_base = mean_variance(data.zs());
    let len_base = median_pairwise_distance(data.xs())
        .powi(2)
        .max(f64::MIN_POSITIVE);
    let f2s = logspace(var_base, -2.0, 2.0, lc.f2_points.max(1));
    let l2s = logspace(len_base, -2.0, 2.0, lc.l2_points.max(1));
    let n2s = logspace(var_base, -4.0, 0.0, lc.n2_points.max(1));
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

/// Keeps at most `max_rows` rows by deterministic striding.
fn cap_rows(data: &SupervisedSet, max_rows: usize) -> Result<SupervisedSet> {
    if max_rows == 0 || data.len() <= max_rows {
        return SupervisedSet::new(data.xs().clone(), data.zs().clone()).map_err(Into::into);
    }
    let stride = data.len().div_ceil(max_rows);
    let rows: Vec<usize> = (0..data.len()).step_by(stride).collect();
    let xs = DMatrix::from_fn(rows.len(), data.obs_dim(), |i, j| data.xs()[(rows[i], j)]);
    let zs = DMatrix::from_fn(rows.len(), data.state_dim(), |i, j| data.zs()[(rows[i], j)]);
    SupervisedSet::new(xs, zs).map_err(Into::into)
}

fn constant_q(held: &SupervisedSet, mean: &MeanRegressor) -> Result<QModel> {
    let d = held.state_dim();
    let m = held.len();
    if m < d + 1 {
        return Err(BenchError::Config(format!(
            "need at least {} held-out rows to estimate a constant covariance, got {m}",
            d + 1
        )));
    }
    let mut q = DMatrix::zeros(d, d);
    for i in 0..m {
        let r = held.z_row(i) - mean.predict(&held.x_row(i));
        q += &r * r.transpose();
    }
    q /= m as f64;
    let ridge = 1e-6 * mean_variance(held.zs());
    for j in 0..d {
        q[(j, j)] += ridge;
    }
    QModel::constant(q).map_err(Into::into)
}

/// Fits the configured regressor on two thirds of the data and its
/// covariance model on the held-out third.
pub fn fit_learner(lc: &LearnerSection, data: &SupervisedSet, seed: u64) -> Result<FittedMoments> {
    let capped = cap_rows(data, lc.max_train_rows)?;
    let (fit_half, held_half) = capped.split_two_to_one(seed)?;
    let fit_half = if lc.sparsify == "octant" {
        sparsify_octants(&fit_half)?.set
    } else {
        fit_half
    };
    let mean = match lc.kind.as_str() {
        "nw" => MeanRegressor::Nw(nw_fit(
            &fit_half,
            &bandwidth_grid(&fit_half, lc.bandwidth_points),
        )?),
        "gp" => MeanRegressor::Gp(gp_fit(
            &fit_half,
            KernelFamily::Rbf,
            &hyper_grid(&fit_half, lc),
        )?),
        "mk" => MeanRegressor::Gp(gp_fit(
            &fit_half,
            KernelFamily::Additive,
            &hyper_grid(&fit_half, lc),
        )?),
        "mlp" => MeanRegressor::Mlp(mlp_fit(
            &fit_half,
            lc.hidden_width,
            lc.epochs,
            lc.step,
            seed,
        )?),
        other => {
            return Err(BenchError::Config(format!(
                "unknown learner kind {other:?}"
            )))
        }
    };
    let cov = match lc.q_mode() {
        "smoothed" => fit_q_residuals(
            &held_half,
            &|x| mean.predict(x),
            &bandwidth_grid(&held_half, lc.bandwidth_points),
        )?,
        _ => constant_q(&held_half, &mean)?,
    };
    Ok(FittedMoments { mean, cov })
}

/// Fits every piece the plan requests from one training trajectory.
pub fn fit_context(
    cfg: &BenchConfig,
    plan: &FitPlan,
    train: &Trajectory,
    seed: u64,
) -> Result<FittedContext> {
    let stats = FeatureStats::from_reference(&train.observations)?;
    let s_approx = sample_covariance(&train.states)?;
    let data = SupervisedSet::from_trajectory(train)?;
    let dynamics = if plan.dynamics {
        Some(fit_state_dynamics(&train.states)?)
    } else {
        None
    };
    let linear_obs = if plan.linear_obs {
        Some(fit_linear_observation(&data)?)
    } else {
        None
    };
    let moments = if plan.learner {
        let lc = cfg
            .learner
            .as_ref()
            .ok_or_else(|| BenchError::Config("a [learner] section is required".into()))?;
        Some(fit_learner(lc, &data, seed)?)
    } else {
        None
    };
    Ok(FittedContext {
        moments,
        linear_obs,
        dynamics,
        s_approx,
        stats,
    })
}

/// Simulates the test trajectory and, when training is configured, the
/// training trajectory plus the fitted context.
pub fn prepare_seed(
    cfg: &BenchConfig,
    model: &BuiltModel,
    plan: &FitPlan,
    seed: u64,
) -> Result<SeedData> {
    let e = &cfg.experiment;
    let test = simulate(model.state.as_dyn(), model.obs.as_dyn(), e.steps, seed)?;
    let fitted = if e.train_steps > 0 {
        let train = simulate(
            model.state.as_dyn(),
            model.obs.as_dyn(),
            e.train_steps,
            seed ^ TRAIN_SEED_XOR,
        )?;
        Some(Arc::new(fit_context(cfg, plan, &train, seed)?))
    } else {
        None
    };
    Ok(SeedData { test, fitted })
}

pub fn prepare_all_seeds(
    cfg: &BenchConfig,
    model: &BuiltModel,
    threads: usize,
) -> Result<Vec<std::result::Result<SeedData, String>>> {
    let plan = fit_plan(cfg)?;
    let seeds = &cfg.experiment.seeds;
    Ok(parallel_map(seeds.len(), threads, |i| {
        prepare_seed(cfg, model, &plan, seeds[i]).map_err(condense)
    }))
}

/// Flattens an error into a single CSV-safe cell.
pub fn condense(err: BenchError) -> String {
    format!("{err}").replace([',', '\n'], "; ")
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub moments: MomentsSource,
    pub dynamics: DynamicsSource,
    /// Record per-step covariances (belief output); costs extra for the
    /// particle filters, so the bench path leaves it off.
    pub want_covs: bool,
    /// Sigma-point spread for every unscented pass in the run.
    pub ut_alpha: f64,
}

impl RunOptions {
    pub fn from_config(cfg: &BenchConfig, want_covs: bool) -> Result<Self> {
        Ok(Self {
            moments: cfg.moments_source()?,
            dynamics: cfg.dynamics_source()?,
            want_covs,
            ut_alpha: cfg.experiment.ut_alpha,
        })
    }

    fn ut(&self) -> UtConfig {
        UtConfig {
            alpha: self.ut_alpha,
            ..UtConfig::default()
        }
    }
}

/// One filter's full pass over a trajectory.
pub struct TrialOutput {
    /// Posterior mean per step, one row per observation.
    pub means: DMatrix<f64>,
    /// Posterior covariance per step; empty unless requested.
    pub covs: Vec<DMatrix<f64>>,
    pub fallback_flags: Vec<bool>,
    pub wall_seconds: f64,
}

struct Resolution<'a> {
    dyn_state: &'a dyn StateModel,
    lin_spec: Option<&'a LinearStateSpec>,
    s_approx: Option<DMatrix<f64>>,
    moments: Option<&'a dyn DiscriminativeModel>,
    kf_obs: Option<&'a LinearGaussianObs>,
}

fn resolve<'a>(
    model: &'a BuiltModel,
    data: &'a SeedData,
    opts: &RunOptions,
) -> Result<Resolution<'a>> {
    let fitted = data.fitted.as_deref();
    let (dyn_state, lin_spec): (&dyn StateModel, Option<&LinearStateSpec>) = match opts.dynamics {
        DynamicsSource::Fitted => {
            let ctx = fitted.ok_or_else(|| {
                BenchError::Config("fitted dynamics need training data; set train_steps".into())
            })?;
            let spec = ctx.dynamics.as_ref().ok_or_else(|| {
                BenchError::Config("dynamics were not fitted for this run".into())
            })?;
            (spec as &dyn StateModel, Some(spec))
        }
        DynamicsSource::True => (model.state.as_dyn(), model.state.linear()),
    };
    let s_approx = match lin_spec {
        Some(spec) => Some(spec.s().clone()),
        None => fitted.map(|c| c.s_approx.clone()),
    };
    let moments: Option<&dyn DiscriminativeModel> = match opts.moments {
        MomentsSource::Exact => model.exact.as_deref(),
        MomentsSource::Learner => fitted
            .and_then(|c| c.moments.as_ref())
            .map(|m| m as &dyn DiscriminativeModel),
    };
    let kf_obs = match &model.obs {
        ObsKind::Linear(o) => Some(o),
        _ => fitted.and_then(|c| c.linear_obs.as_ref()),
    };
    Ok(Resolution {
        dyn_state,
        lin_spec,
        s_approx,
        moments,
        kf_obs,
    })
}

impl<'a> Resolution<'a> {
    fn need_moments(&self, source: MomentsSource) -> Result<&'a dyn DiscriminativeModel> {
        self.moments.ok_or_else(|| match source {
            MomentsSource::Exact => BenchError::Config(
                "this model family has no closed-form conditional moments; \
                 set moments = \"learner\""
                    .into(),
            ),
            MomentsSource::Learner => BenchError::Config(
                "no learned moments available; set train_steps and add a [learner] section".into(),
            ),
        })
    }

    fn need_s(&self) -> Result<&DMatrix<f64>> {
        self.s_approx.as_ref().ok_or_else(|| {
            BenchError::Config(
                "no stationary covariance available; nonlinear dynamics need training data".into(),
            )
        })
    }

    fn need_lin_spec(&self, filter: &str) -> Result<&'a LinearStateSpec> {
        self.lin_spec.ok_or_else(|| {
            BenchError::Config(format!(
                "{filter} needs linear state dynamics; set dynamics = \"fitted\" \
                 for nonlinear models"
            ))
        })
    }
}

fn record_belief(
    means: &mut DMatrix<f64>,
    covs: &mut Vec<DMatrix<f64>>,
    t: usize,
    belief: &GaussianBelief,
    want_covs: bool,
) {
    for j in 0..belief.dim() {
        means[(t, j)] = belief.mean()[j];
    }
    if want_covs {
        covs.push(belief.cov().clone());
    }
}

fn weighted_cov(ens: &ParticleEnsemble, mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let peak = ens
        .log_weights()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut cov = DMatrix::zeros(d, d);
    for (particle, lw) in ens.particles().iter().zip(ens.log_weights()) {
        let w = (lw - peak).exp();
        let dv = particle - mean;
        cov += &dv * dv.transpose() * w;
        total += w;
    }
    cov / total
}

fn run_kf(res: &Resolution, test: &Trajectory, want_covs: bool) -> Result<TrialOutput> {
    let spec = res.need_lin_spec("the Kalman filter")?;
    let obs = res.kf_obs.ok_or_else(|| {
        BenchError::Config(
            "the Kalman filter needs a linear observation model; set train_steps to fit one".into(),
        )
    })?;
    let steps = test.len();
    let mut means = DMatrix::zeros(steps, spec.dim());
    let mut covs = Vec::new();
    let start = Instant::now();
    let mut belief = GaussianBelief::prior(spec.s())?;
    for t in 0..steps {
        if t > 0 {
            belief = predict_linear(&belief, spec.a(), spec.gamma())?;
        }
        belief = kf_update(&belief, obs, &test.observation_at(t))?;
        record_belief(&mut means, &mut covs, t, &belief, want_covs);
    }
    Ok(TrialOutput {
        means,
        covs,
        fallback_flags: vec![false; steps],
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Shared body for the extended and iterated extended filters; `max_iters`
/// of one is the plain extended update.
fn run_ekf(
    res: &Resolution,
    model: &BuiltModel,
    test: &Trajectory,
    want_covs: bool,
    max_iters: usize,
) -> Result<TrialOutput> {
    let steps = test.len();
    let d = res.dyn_state.dim();
    let mut means = DMatrix::zeros(steps, d);
    let mut covs = Vec::new();
    let s = res.need_s()?.clone();
    let mut flags = vec![false; steps];

    // The floor model keeps its true observation map; everything else goes
    // through a linear observation, fitted when the model itself is not
    // linear.
    enum Update<'m> {
        Floor {
            obs: &'m dkf_core::models::FloorObsModel,
            jac: DMatrix<f64>,
        },
        Linear(&'m LinearGaussianObs),
    }
    let update = match &model.obs {
        ObsKind::Floor(fl) => Update::Floor {
            obs: fl,
            jac: fl.ae_jacobian(),
        },
        _ => Update::Linear(res.kf_obs.ok_or_else(|| {
            BenchError::Config(
                "the extended filters need a linear observation model here; \
                 set train_steps to fit one"
                    .into(),
            )
        })?),
    };

    let start = Instant::now();
    let mut belief = GaussianBelief::prior(&s)?;
    for t in 0..steps {
        let pred = if t > 0 {
            predict_linearized(&belief, res.dyn_state)?
        } else {
            belief.clone()
        };
        let x = test.observation_at(t);
        belief = match &update {
            Update::Floor { obs, jac } => {
                let h = |z: &DVector<f64>| obs.mean_obs(z);
                let jacobian = |_: &DVector<f64>| jac.clone();
                let packed = NonlinearObs {
                    h: &h,
                    jacobian: &jacobian,
                    lambda: obs.lambda(),
                };
                match iekf_update(&pred, &packed, &x, max_iters) {
                    Ok(b) => b,
                    Err(dkf_core::CoreError::Divergence {
                        last_stable: Some(b),
                        ..
                    }) => {
                        // Keep filtering from the last stable iterate and
                        // report the step as a fallback.
                        flags[t] = true;
                        *b
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            Update::Linear(obs) => kf_update(&pred, obs, &x)?,
        };
        record_belief(&mut means, &mut covs, t, &belief, want_covs);
    }
    Ok(TrialOutput {
        means,
        covs,
        fallback_flags: flags,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_ukf(
    res: &Resolution,
    model: &BuiltModel,
    test: &Trajectory,
    want_covs: bool,
    cfg: UtConfig,
) -> Result<TrialOutput> {
    let steps = test.len();
    let d = res.dyn_state.dim();
    let mut means = DMatrix::zeros(steps, d);
    let mut covs = Vec::new();
    let s = res.need_s()?.clone();

    enum Map<'m> {
        Floor(&'m dkf_core::models::FloorObsModel),
        Linear(&'m LinearGaussianObs),
    }
    let map = match &model.obs {
        ObsKind::Floor(fl) => Map::Floor(fl),
        _ => Map::Linear(res.kf_obs.ok_or_else(|| {
            BenchError::Config(
                "the unscented filter needs a linear observation model here; \
                 set train_steps to fit one"
                    .into(),
            )
        })?),
    };

    let start = Instant::now();
    let mut belief = GaussianBelief::prior(&s)?;
    for t in 0..steps {
        let pred = if t > 0 {
            predict_unscented(&belief, res.dyn_state, &cfg)?
        } else {
            belief.clone()
        };
        let x = test.observation_at(t);
        belief = match &map {
            Map::Floor(obs) => {
                let h = |z: &DVector<f64>| obs.mean_obs(z);
                ukf_update(&pred, &h, obs.lambda(), &x, &cfg)?
            }
            Map::Linear(obs) => {
                let h = |z: &DVector<f64>| obs.mean(z);
                ukf_update(&pred, &h, obs.lambda(), &x, &cfg)?
            }
        };
        record_belief(&mut means, &mut covs, t, &belief, want_covs);
    }
    Ok(TrialOutput {
        means,
        covs,
        fallback_flags: vec![false; steps],
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_dkf(
    res: &Resolution,
    dm: &dyn DiscriminativeModel,
    test: &Trajectory,
    variant: LinearDkfVariant,
    want_covs: bool,
    filter_label: &str,
) -> Result<TrialOutput> {
    let spec = res.need_lin_spec(filter_label)?;
    let start = Instant::now();
    let run = dkf_filter(&test.observations, spec, dm, variant)?;
    let wall = start.elapsed().as_secs_f64();
    Ok(dkf_run_to_output(run, wall, want_covs))
}

fn dkf_run_to_output(
    run: dkf_core::dkf::DkfRun,
    wall: f64,
    want_covs: bool,
) -> TrialOutput {
    let steps = run.beliefs.len();
    let d = run.beliefs[0].dim();
    let mut means = DMatrix::zeros(steps, d);
    let mut covs = Vec::new();
    for (t, belief) in run.beliefs.iter().enumerate() {
        record_belief(&mut means, &mut covs, t, belief, want_covs);
    }
    TrialOutput {
        means,
        covs,
        fallback_flags: run.fallback_flags,
        wall_seconds: wall,
    }
}

fn run_hybrid(
    res: &Resolution,
    test: &Trajectory,
    prediction: HybridPrediction,
    source: MomentsSource,
    want_covs: bool,
) -> Result<TrialOutput> {
    let dm = res.need_moments(source)?;
    let s = res.need_s()?;
    let start = Instant::now();
    let run = hybrid_filter(&test.observations, res.dyn_state, prediction, dm, s)?;
    let wall = start.elapsed().as_secs_f64();
    Ok(dkf_run_to_output(run, wall, want_covs))
}

fn run_unfiltered(
    res: &Resolution,
    test: &Trajectory,
    source: MomentsSource,
    want_covs: bool,
) -> Result<TrialOutput> {
    let dm = res.need_moments(source)?;
    let steps = test.len();
    let d = test.state_dim();
    let mut means = DMatrix::zeros(steps, d);
    let mut covs = Vec::new();
    let start = Instant::now();
    for t in 0..steps {
        let (f, q) = dm.moments(&test.observation_at(t))?;
        for j in 0..d {
            means[(t, j)] = f[j];
        }
        if want_covs {
            covs.push(q);
        }
    }
    Ok(TrialOutput {
        means,
        covs,
        fallback_flags: vec![false; steps],
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_pf(
    res: &Resolution,
    model: &BuiltModel,
    test: &Trajectory,
    count: usize,
    seed: u64,
    want_covs: bool,
) -> Result<TrialOutput> {
    let state = res.dyn_state;
    let obs = model.obs.as_dyn();
    let steps = test.len();
    let d = state.dim();
    let mut means = DMatrix::zeros(steps, d);
    let mut covs = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut ens = ParticleEnsemble::from_prior(state, count, &mut rng)?;
    for t in 0..steps {
        let x = test.observation_at(t);
        let loglik = obs.bound_log_likelihood(&x);
        if t == 0 {
            ens.reweight(loglik.as_ref())?;
        } else {
            ens.step(state, loglik.as_ref(), &mut rng)?;
        }
        let mean = ens.posterior_mean();
        for j in 0..d {
            means[(t, j)] = mean[j];
        }
        if want_covs {
            covs.push(weighted_cov(&ens, &mean));
        }
    }
    Ok(TrialOutput {
        means,
        covs,
        fallback_flags: vec![false; steps],
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Particle filter whose weights come from the discriminative moments.
///
/// Each particle `z` is scored with the log ratio of the conditional
/// density `N(z; f(x), Q(x))` to the stationary density `N(z; 0, S)`, so
/// the ensemble needs only the moment maps and never the generative
/// observation likelihood.
fn run_pf_dkf(
    res: &Resolution,
    test: &Trajectory,
    count: usize,
    seed: u64,
    source: MomentsSource,
    want_covs: bool,
) -> Result<TrialOutput> {
    let dm = res.need_moments(source)?;
    let s = res.need_s()?;
    let s_chol = chol_or_err(&symmetrize(s), "stationary covariance estimate")?;
    let state = res.dyn_state;
    let steps = test.len();
    let d = state.dim();
    let zero = DVector::zeros(d);
    let mut means = DMatrix::zeros(steps, d);
    let mut covs = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut ens = ParticleEnsemble::from_prior(state, count, &mut rng)?;
    for t in 0..steps {
        let x = test.observation_at(t);
        let (f, q) = dm.moments(&x)?;
        let q_chol = chol_or_err(&symmetrize(&q), "discriminative covariance")?;
        let loglik = |z: &DVector<f64>| {
            log_density_prefactored(z, &f, &q_chol) - log_density_prefactored(z, &zero, &s_chol)
        };
        if t == 0 {
            ens.reweight(&loglik)?;
        } else {
            ens.step(state, &loglik, &mut rng)?;
        }
        let mean = ens.posterior_mean();
        for j in 0..d {
            means[(t, j)] = mean[j];
        }
        if want_covs {
            covs.push(weighted_cov(&ens, &mean));
        }
    }
    Ok(TrialOutput {
        means,
        covs,
        fallback_flags: vec![false; steps],
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs one filter over one seed's test trajectory.
pub fn run_filter(
    spec: &FilterSpec,
    model: &BuiltModel,
    data: &SeedData,
    opts: &RunOptions,
    trial_seed: u64,
) -> Result<TrialOutput> {
    let res = resolve(model, data, opts)?;
    let test = &data.test;
    match spec {
        FilterSpec::Kf => run_kf(&res, test, opts.want_covs),
        FilterSpec::Ekf => run_ekf(&res, model, test, opts.want_covs, 1),
        FilterSpec::Iekf => run_ekf(&res, model, test, opts.want_covs, 25),
        FilterSpec::Ukf => run_ukf(&res, model, test, opts.want_covs, opts.ut()),
        FilterSpec::Pf(n) => run_pf(&res, model, test, *n, trial_seed, opts.want_covs),
        FilterSpec::PfDkf(n) => {
            run_pf_dkf(&res, test, *n, trial_seed, opts.moments, opts.want_covs)
        }
        FilterSpec::DkfExact => {
            let dm = model.exact.as_deref().ok_or_else(|| {
                BenchError::Config(
                    "this model family has no closed-form conditional moments; \
                     use dkf:learner"
                        .into(),
                )
            })?;
            run_dkf(
                &res,
                dm,
                test,
                LinearDkfVariant::Exact,
                opts.want_covs,
                "the discriminative filter",
            )
        }
        FilterSpec::DkfLearner => {
            let dm = data
                .fitted
                .as_deref()
                .and_then(|c| c.moments.as_ref())
                .ok_or_else(|| {
                    BenchError::Config(
                        "no learned moments available; set train_steps and add a \
                         [learner] section"
                            .into(),
                    )
                })?;
            run_dkf(
                &res,
                dm,
                test,
                LinearDkfVariant::Exact,
                opts.want_covs,
                "the discriminative filter",
            )
        }
        FilterSpec::RobustDkf => {
            let dm = res.need_moments(opts.moments)?;
            run_dkf(
                &res,
                dm,
                test,
                LinearDkfVariant::Robust,
                opts.want_covs,
                "the robust discriminative filter",
            )
        }
        FilterSpec::HybridEkf => run_hybrid(
            &res,
            test,
            HybridPrediction::Linearized,
            opts.moments,
            opts.want_covs,
        ),
        FilterSpec::HybridUkf => run_hybrid(
            &res,
            test,
            HybridPrediction::Unscented(opts.ut()),
            opts.moments,
            opts.want_covs,
        ),
        FilterSpec::Unfiltered => run_unfiltered(&res, test, opts.moments, opts.want_covs),
    }
}

/// Scalar metrics for one completed trial.
#[derive(Debug, Clone)]
pub struct TrialMetrics {
    pub rmse: f64,
    pub normalized_rmse: f64,
    pub angular: Option<(f64, usize)>,
    pub wall_seconds: f64,
    pub fallback_count: usize,
}

pub fn evaluate_trial(out: &TrialOutput, truth: &DMatrix<f64>) -> Result<TrialMetrics> {
    let rmse = metrics::rmse(&out.means, truth)?;
    let normalized_rmse = metrics::normalized_rmse(&out.means, truth)?;
    let angular = if truth.ncols() == 2 {
        Some(metrics::mean_abs_angular_error(&out.means, truth)?)
    } else {
        None
    };
    Ok(TrialMetrics {
        rmse,
        normalized_rmse,
        angular,
        wall_seconds: out.wall_seconds,
        fallback_count: out.fallback_flags.iter().filter(|f| **f).count(),
    })
}

/// One CSV row worth of results: either metrics or the error that stopped
/// the trial. Failed trials never stop the others.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub filter: String,
    pub seed: u64,
    pub metrics: std::result::Result<TrialMetrics, String>,
}

pub fn run_trials(
    model: &BuiltModel,
    opts: &RunOptions,
    filters: &[FilterSpec],
    seeds: &[u64],
    seed_data: &[std::result::Result<SeedData, String>],
    threads: usize,
) -> Vec<TrialRecord> {
    let mut jobs = Vec::with_capacity(filters.len() * seeds.len());
    for filter in filters {
        for (si, &seed) in seeds.iter().enumerate() {
            jobs.push((filter, si, seed));
        }
    }
    parallel_map(jobs.len(), threads, |k| {
        let (filter, si, seed) = jobs[k];
        let name = filter.name();
        let metrics = match &seed_data[si] {
            Err(msg) => Err(msg.clone()),
            Ok(data) => run_filter(filter, model, data, opts, trial_seed(seed, si, &name))
                .and_then(|out| evaluate_trial(&out, &data.test.states))
                .map_err(condense),
        };
        TrialRecord {
            filter: name,
            seed,
            metrics,
        }
    })
}

pub fn metric_header() -> Vec<String> {
    [
        "filter",
        "seed",
        "rmse",
        "normalized_rmse",
        "mean_abs_angular_error",
        "angular_skipped",
        "wall_time_seconds",
        "fallback_count",
        "error",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn metric_cells(m: &TrialMetrics) -> Vec<String> {
    let (ang, skipped) = match m.angular {
        Some((v, k)) => (fmt_f64(v), k.to_string()),
        None => (String::new(), String::new()),
    };
    vec![
        fmt_f64(m.rmse),
        fmt_f64(m.normalized_rmse),
        ang,
        skipped,
        fmt_f64(m.wall_seconds),
        m.fallback_count.to_string(),
        String::new(),
    ]
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn pm(values: &[f64]) -> String {
    if values.is_empty() {
        return String::new();
    }
    let (m, s) = mean_std(values);
    format!("{}±{}", fmt_f64(m), fmt_f64(s))
}

/// Renders per-trial rows plus one summary row per filter, and reports
/// whether any trial failed.
pub fn records_to_rows(
    records: &[TrialRecord],
    filters: &[FilterSpec],
) -> (Vec<Vec<String>>, bool) {
    let mut rows = Vec::with_capacity(records.len() + filters.len());
    let mut any_error = false;
    for rec in records {
        let mut row = vec![rec.filter.clone(), rec.seed.to_string()];
        match &rec.metrics {
            Ok(m) => row.extend(metric_cells(m)),
            Err(msg) => {
                any_error = true;
                row.extend(vec![String::new(); 6]);
                row.push(msg.clone());
            }
        }
        rows.push(row);
    }
    for filter in filters {
        let name = filter.name();
        let ok: Vec<&TrialMetrics> = records
            .iter()
            .filter(|r| r.filter == name)
            .filter_map(|r| r.metrics.as_ref().ok())
            .collect();
        let failed = records
            .iter()
            .filter(|r| r.filter == name && r.metrics.is_err())
            .count();
        let total = ok.len() + failed;
        let collect = |f: &dyn Fn(&TrialMetrics) -> Option<f64>| -> Vec<f64> {
            ok.iter().filter_map(|m| f(m)).collect()
        };
        let mut row = vec![name, "summary".to_string()];
        row.push(pm(&collect(&|m| Some(m.rmse))));
        row.push(pm(&collect(&|m| Some(m.normalized_rmse))));
        row.push(pm(&collect(&|m| m.angular.map(|(v, _)| v))));
        row.push(String::new());
        row.push(pm(&collect(&|m| Some(m.wall_seconds))));
        row.push(pm(&collect(&|m| Some(m.fallback_count as f64))));
        row.push(if failed > 0 {
            format!("{failed} of {total} trials failed")
        } else {
            String::new()
        });
        rows.push(row);
    }
    (rows, any_error)
}

/// A full experiment: CSV-ready rows plus the raw records for callers that
/// read values directly.
pub struct ExperimentOutcome {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub records: Vec<TrialRecord>,
    pub any_error: bool,
}

pub fn run_experiment(cfg: &BenchConfig, threads: usize) -> Result<ExperimentOutcome> {
    let model = cfg.model.build()?;
    let seed_data = prepare_all_seeds(cfg, &model, threads)?;
    run_experiment_on(cfg, &model, &seed_data, threads)
}

/// Experiment body over already-prepared seed data; the robustness sweep
/// reuses this with modified observations.
pub fn run_experiment_on(
    cfg: &BenchConfig,
    model: &BuiltModel,
    seed_data: &[std::result::Result<SeedData, String>],
    threads: usize,
) -> Result<ExperimentOutcome> {
    let opts = RunOptions::from_config(cfg, false)?;
    let filters = cfg.filters();
    let records = run_trials(
        model,
        &opts,
        &filters,
        &cfg.experiment.seeds,
        seed_data,
        threads,
    );
    let (rows, any_error) = records_to_rows(&records, &filters);
    Ok(ExperimentOutcome {
        header: metric_header(),
        rows,
        records,
        any_error,
    })
}

/// Replaces a seed's test observations with a corrupted copy, keeping the
/// fitted context (and therefore the reference statistics) untouched.
pub fn corrupt_seed(
    data: &SeedData,
    feature: usize,
    offset_z: f64,
    saturate_z: Option<f64>,
) -> Result<SeedData> {
    let ctx = data.fitted.as_ref().ok_or_else(|| {
        BenchError::Config(
            "feature corruption needs training data for reference statistics; set train_steps"
                .into(),
        )
    })?;
    let mut observations = if offset_z == 0.0 {
        data.test.observations.clone()
    } else {
        metrics::inject_noise(&data.test.observations, feature, offset_z, &ctx.stats)?
    };
    if let Some(threshold) = saturate_z {
        observations = metrics::saturate_features(&observations, threshold, &ctx.stats)?;
    }
    Ok(SeedData {
        test: Trajectory {
            states: data.test.states.clone(),
            observations,
            seed: data.test.seed,
        },
        fitted: Some(Arc::clone(ctx)),
    })
}

pub struct RobustnessOutcome {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// `(offset, saturate_z, record)` for each trial, in emission order.
    pub records: Vec<(f64, Option<f64>, TrialRecord)>,
    pub any_error: bool,
}

/// Runs the configured filters across feature-corruption levels: every
/// offset without saturation, then every offset with the configured
/// saturation threshold. Offset zero without saturation reproduces the
/// plain bench rows exactly.
pub fn run_robustness(cfg: &BenchConfig, threads: usize) -> Result<RobustnessOutcome> {
    let section = cfg
        .robustness
        .as_ref()
        .ok_or_else(|| BenchError::Config("a [robustness] section is required".into()))?;
    if section.offsets.is_empty() {
        return Err(BenchError::Config("robustness.offsets must not be empty".into()));
    }
    let model = cfg.model.build()?;
    let base = prepare_all_seeds(cfg, &model, threads)?;
    let opts = RunOptions::from_config(cfg, false)?;
    let filters = cfg.filters();

    let mut variants: Vec<(f64, Option<f64>)> =
        section.offsets.iter().map(|&o| (o, None)).collect();
    if let Some(threshold) = section.saturate_z {
        for &o in &section.offsets {
            variants.push((o, Some(threshold)));
        }
    }

    let mut header = vec!["offset".to_string(), "saturate_z".to_string()];
    header.extend(metric_header());
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut any_error = false;
    for (offset, saturate) in variants {
        let data: Vec<std::result::Result<SeedData, String>> = base
            .iter()
            .map(|entry| match entry {
                Err(msg) => Err(msg.clone()),
                Ok(sd) => {
                    corrupt_seed(sd, section.inject_feature, offset, saturate).map_err(condense)
                }
            })
            .collect();
        let trial_records = run_trials(
            &model,
            &opts,
            &filters,
            &cfg.experiment.seeds,
            &data,
            threads,
        );
        let (sub_rows, sub_error) = records_to_rows(&trial_records, &filters);
        any_error |= sub_error;
        let sat_cell = saturate.map(fmt_f64).unwrap_or_default();
        for row in sub_rows {
            let mut full = vec![fmt_f64(offset), sat_cell.clone()];
            full.extend(row);
            rows.push(full);
        }
        for rec in trial_records {
            records.push((offset, saturate, rec));
        }
    }
    Ok(RobustnessOutcome {
        header,
        rows,
        records,
        any_error,
    })
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite medians"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One replicate of the grid-consistency check: simulate, filter both
/// ways, return the median per-step total variation distance.
fn consistency_trial(
    model: &BuiltModel,
    grid: &Grid1d,
    transition: &GridTransition,
    seed: u64,
    steps: usize,
) -> Result<f64> {
    let ObsKind::Mixture(mix) = &model.obs else {
        return Err(BenchError::Config(
            "the consistency sweep needs a kalman_mixture observation model".into(),
        ));
    };
    let spec = model
        .state
        .linear()
        .ok_or_else(|| BenchError::Config("consistency needs linear dynamics".into()))?;
    let traj = simulate(spec, mix, steps, seed)?;
    let run = dkf_filter(&traj.observations, spec, mix, LinearDkfVariant::Exact)?;
    let s00 = spec.s()[(0, 0)];
    let log_prior = |z: f64| -0.5 * z * z / s00;
    let mut tvs = Vec::with_capacity(steps);
    let mut post: Option<GridPosterior> = None;
    for t in 0..steps {
        let x = traj.observation_at(t);
        let loglik = mix.scalar_log_likelihood_fn(&x)?;
        let next = match &post {
            None => grid_init(grid, &log_prior, &loglik)?,
            Some(p) => grid_step(p, grid, transition, &loglik)?,
        };
        tvs.push(metrics::tv_distance_grid(&run.beliefs[t], grid, &next)?);
        post = Some(next);
    }
    Ok(median_of(tvs))
}

pub struct ConsistencyOutcome {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Median total variation per replicate, one inner entry per ladder
    /// step, in ladder order.
    pub medians: Vec<Vec<f64>>,
    /// Fraction of replicates where each adjacent ladder pair decreased.
    pub pair_fractions: Vec<f64>,
    /// Fraction of replicates monotone across the whole ladder.
    pub monotone_fraction: f64,
}

/// Sweeps observation count for the scalar mixture model and measures how
/// closely the discriminative posterior tracks a dense-grid reference.
pub fn run_consistency(cfg: &BenchConfig, threads: usize) -> Result<ConsistencyOutcome> {
    let section = cfg
        .consistency
        .as_ref()
        .ok_or_else(|| BenchError::Config("a [consistency] section is required".into()))?;
    if cfg.model.kind != "kalman_mixture" || cfg.model.state_dim != 1 {
        return Err(BenchError::Config(
            "the consistency sweep needs a one-dimensional kalman_mixture model".into(),
        ));
    }
    if section.obs_dims.len() < 2 {
        return Err(BenchError::Config(
            "consistency.obs_dims needs at least two ladder steps".into(),
        ));
    }
    if section.reps == 0 {
        return Err(BenchError::Config("consistency.reps must be positive".into()));
    }
    for (list, what) in [
        (&section.second_noise_scales, "second_noise_scales"),
        (&section.h_gains, "h_gains"),
    ] {
        if !list.is_empty() && list.len() != section.obs_dims.len() {
            return Err(BenchError::Config(format!(
                "consistency.{what} must match obs_dims in length"
            )));
        }
    }
    let grid = Grid1d::uniform(section.grid_lo, section.grid_hi, section.grid_points)?;
    let models: Vec<BuiltModel> = section
        .obs_dims
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut model = cfg.model.clone();
            if let Some(&gain) = section.h_gains.get(i) {
                model.h_gain = gain;
            }
            if let Some(&scale) = section.second_noise_scales.get(i) {
                model.second_noise_scale = scale;
            }
            model.build_variant(n, cfg.model.h_seed.wrapping_add(n as u64))
        })
        .collect::<Result<_>>()?;
    let spec = models[0]
        .state
        .linear()
        .expect("mixture models have linear dynamics");
    let transition = GridTransition::scalar_ar1(&grid, spec.a()[(0, 0)], spec.gamma()[(0, 0)])?;
    let master = cfg.experiment.seeds[0];
    let steps = cfg.experiment.steps;

    let dims = section.obs_dims.len();
    let jobs: Vec<(usize, usize)> = (0..section.reps)
        .flat_map(|rep| (0..dims).map(move |di| (rep, di)))
        .collect();
    let results = parallel_map(jobs.len(), threads, |k| {
        let (rep, di) = jobs[k];
        consistency_trial(
            &models[di],
            &grid,
            &transition,
            trial_seed(master, rep, "consistency"),
            steps,
        )
        .map_err(condense)
    });

    let mut medians = vec![vec![0.0; dims]; section.reps];
    for (k, result) in results.into_iter().enumerate() {
        let (rep, di) = jobs[k];
        medians[rep][di] = result.map_err(BenchError::Metric)?;
    }

    let mut pair_fractions = Vec::with_capacity(dims - 1);
    for di in 0..dims - 1 {
        let hits = medians
            .iter()
            .filter(|m| m[di + 1] < m[di])
            .count();
        pair_fractions.push(hits as f64 / section.reps as f64);
    }
    let monotone = medians
        .iter()
        .filter(|m| (0..dims - 1).all(|di| m[di + 1] < m[di]))
        .count();
    let monotone_fraction = monotone as f64 / section.reps as f64;

    let header = ["kind", "rep", "obs_dim", "value"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (rep, meds) in medians.iter().enumerate() {
        for (di, &value) in meds.iter().enumerate() {
            rows.push(vec![
                "median_tv".to_string(),
                rep.to_string(),
                section.obs_dims[di].to_string(),
                fmt_f64(value),
            ]);
        }
    }
    for (di, &fraction) in pair_fractions.iter().enumerate() {
        rows.push(vec![
            "pair_decrease".to_string(),
            String::new(),
            format!("{}->{}", section.obs_dims[di], section.obs_dims[di + 1]),
            fmt_f64(fraction),
        ]);
    }
    rows.push(vec![
        "monotone_fraction".to_string(),
        String::new(),
        String::new(),
        fmt_f64(monotone_fraction),
    ]);
    Ok(ConsistencyOutcome {
        header,
        rows,
        medians,
        pair_fractions,
        monotone_fraction,
    })
}

/// Belief trace rows for one trial: time, mean, row-major covariance, and
/// the fallback flag.
pub fn belief_rows(out: &TrialOutput) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let steps = out.means.nrows();
    let d = out.means.ncols();
    if out.covs.len() != steps {
        return Err(BenchError::Config(
            "belief output needs per-step covariances; rerun with covariance recording".into(),
        ));
    }
    let header = belief_header(d);
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut row = Vec::with_capacity(2 + d + d * d);
        row.push((t + 1).to_string());
        for j in 0..d {
            row.push(fmt_f64(out.means[(t, j)]));
        }
        for i in 0..d {
            for j in 0..d {
                row.push(fmt_f64(out.covs[t][(i, j)]));
            }
        }
        row.push(if out.fallback_flags[t] { "1" } else { "0" }.to_string());
        rows.push(row);
    }
    Ok((header, rows))
}

/// Runs `fit` for the first configured seed and packages the result for
/// the model file.
pub fn fit_to_file(cfg: &BenchConfig, seed: u64) -> Result<FittedModelFile> {
    let model = cfg.model.build()?;
    let train = simulate(
        model.state.as_dyn(),
        model.obs.as_dyn(),
        cfg.experiment.train_steps,
        seed ^ TRAIN_SEED_XOR,
    )?;
    let lc = cfg
        .learner
        .as_ref()
        .ok_or_else(|| BenchError::Config("fit needs a [learner] section".into()))?;
    let data = SupervisedSet::from_trajectory(&train)?;
    let moments = fit_learner(lc, &data, seed)?;
    let dynamics = fit_state_dynamics(&train.states)?;
    let s_approx = sample_covariance(&train.states)?;
    Ok(FittedModelFile {
        moments,
        a: dynamics.a().clone(),
        gamma: dynamics.gamma().clone(),
        s_approx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BenchConfig;

    const LINEAR_CFG: &str = r#"
        [experiment]
        steps = 120
        seeds = [3, 4]
        filters = ["kf", "dkf:exact", "pf:300", "unfiltered"]

        [model]
        kind = "linear"
        a = [[0.9, 0.1], [-0.1, 0.8]]
        gamma = [[0.3, 0.0], [0.0, 0.3]]
        h = [[1.0, 0.0], [0.2, 1.0]]
        lambda = [[0.4, 0.0], [0.0, 0.4]]
    "#;

    #[test]
    fn trial_seeds_are_deterministic_and_distinct() {
        let a = trial_seed(7, 0, "kf");
        assert_eq!(a, trial_seed(7, 0, "kf"));
        assert_ne!(a, trial_seed(7, 0, "ukf"));
        assert_ne!(a, trial_seed(7, 1, "kf"));
        assert_ne!(a, trial_seed(8, 0, "kf"));
    }

    #[test]
    fn parallel_map_preserves_index_order() {
        let got = parallel_map(23, 4, |k| k * k);
        let want: Vec<usize> = (0..23).map(|k| k * k).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn linear_experiment_beats_the_zero_predictor_everywhere() {
        let cfg = BenchConfig::from_str(LINEAR_CFG).unwrap();
        let outcome = run_experiment(&cfg, 2).unwrap();
        assert!(!outcome.any_error);
        assert_eq!(outcome.records.len(), 8);
        for rec in &outcome.records {
            let m = rec.metrics.as_ref().unwrap();
            assert!(
                m.normalized_rmse < 1.0,
                "{} seed {} scored {}",
                rec.filter,
                rec.seed,
                m.normalized_rmse
            );
            assert!(m.angular.is_some());
        }
        // Per-trial rows plus one summary row per filter.
        assert_eq!(outcome.rows.len(), 8 + 4);
        let summary = &outcome.rows[8];
        assert_eq!(summary[1], "summary");
        assert!(summary[2].contains('±'));
    }

    #[test]
    fn kalman_and_exact_discriminative_runs_coincide() {
        let cfg = BenchConfig::from_str(LINEAR_CFG).unwrap();
        let outcome = run_experiment(&cfg, 1).unwrap();
        let rmse_of = |name: &str, seed: u64| {
            outcome
                .records
                .iter()
                .find(|r| r.filter == name && r.seed == seed)
                .unwrap()
                .metrics
                .as_ref()
                .unwrap()
                .rmse
        };
        for seed in [3, 4] {
            let kf = rmse_of("kf", seed);
            let dkf = rmse_of("dkf:exact", seed);
            assert!(
                (kf - dkf).abs() < 1e-10,
                "seed {seed}: kf {kf} vs dkf {dkf}"
            );
        }
    }

    #[test]
    fn thread_count_does_not_change_metric_rows() {
        let cfg = BenchConfig::from_str(LINEAR_CFG).unwrap();
        let one = run_experiment(&cfg, 1).unwrap();
        let four = run_experiment(&cfg, 4).unwrap();
        assert_eq!(one.rows.len(), four.rows.len());
        for (a, b) in one.rows.iter().zip(four.rows.iter()) {
            // Wall-time cells (index 6 after filter and seed) may differ.
            for j in 0..a.len() {
                if j == 6 {
                    continue;
                }
                assert_eq!(a[j], b[j], "row {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn failed_trials_are_recorded_without_stopping_the_run() {
        let cfg_text = LINEAR_CFG.replace(
            "filters = [\"kf\", \"dkf:exact\", \"pf:300\", \"unfiltered\"]",
            "filters = [\"kf\", \"dkf:learner\"]",
        );
        // dkf:learner without train_steps cannot fit; the config validator
        // rejects it up front, so relax it through the section instead.
        let cfg_text = cfg_text.replace(
            "[model]",
            "train_steps = 200\n        [learner]\n        kind = \"nw\"\n\n        [model]",
        );
        let mut cfg = BenchConfig::from_str(&cfg_text).unwrap();
        // Force a per-row failure by dropping the learner plan after
        // validation: zero training steps means no fitted context.
        cfg.experiment.train_steps = 0;
        let outcome = run_experiment(&cfg, 1).unwrap();
        assert!(outcome.any_error);
        let kf_ok = outcome
            .records
            .iter()
            .filter(|r| r.filter == "kf")
            .all(|r| r.metrics.is_ok());
        assert!(kf_ok);
        let learner_failed = outcome
            .records
            .iter()
            .filter(|r| r.filter == "dkf:learner")
            .all(|r| r.metrics.is_err());
        assert!(learner_failed);
        let summary = outcome
            .rows
            .iter()
            .find(|row| row[0] == "dkf:learner" && row[1] == "summary")
            .unwrap();
        assert!(summary.last().unwrap().contains("2 of 2 trials failed"));
    }

    #[test]
    fn zero_offset_robustness_rows_match_bench_rows() {
        let cfg_text = r#"
            [experiment]
            steps = 80
            train_steps = 400
            seeds = [11]
            filters = ["kf"]

            [model]
            kind = "neural_surrogate"
            state_dim = 2
            features = 8
            h_seed = 2
            a_scale = 0.95
            gain_hi = 1.0
            gain_lo = 0.1
            noise_std = 1.0

            [robustness]
            offsets = [0.0, 2.0]
            saturate_z = 2.0
        "#;
        let cfg = BenchConfig::from_str(cfg_text).unwrap();
        let bench = run_experiment(&cfg, 1).unwrap();
        let robust = run_robustness(&cfg, 1).unwrap();
        assert!(!robust.any_error);
        let bench_kf = bench
            .records
            .iter()
            .find(|r| r.filter == "kf")
            .unwrap()
            .metrics
            .as_ref()
            .unwrap();
        let zero = robust
            .records
            .iter()
            .find(|(o, s, r)| *o == 0.0 && s.is_none() && r.filter == "kf")
            .map(|(_, _, r)| r.metrics.as_ref().unwrap())
            .unwrap();
        assert_eq!(bench_kf.rmse.to_bits(), zero.rmse.to_bits());
        assert_eq!(
            bench_kf.normalized_rmse.to_bits(),
            zero.normalized_rmse.to_bits()
        );
        // A two-sigma shift on one feature must change the result.
        let shifted = robust
            .records
            .iter()
            .find(|(o, s, r)| *o == 2.0 && s.is_none() && r.filter == "kf")
            .map(|(_, _, r)| r.metrics.as_ref().unwrap())
            .unwrap();
        assert!(shifted.rmse > bench_kf.rmse);
    }

    #[test]
    fn belief_rows_cover_mean_covariance_and_flag() {
        let out = TrialOutput {
            means: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            covs: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5],
            fallback_flags: vec![false, true],
            wall_seconds: 0.0,
        };
        let (header, rows) = belief_rows(&out).unwrap();
        assert_eq!(
            header,
            vec!["t", "mu1", "mu2", "sigma11", "sigma12", "sigma21", "sigma22", "fallback"]
        );
        assert_eq!(rows[0], vec!["1", "1", "2", "1", "0", "0", "1", "0"]);
        assert_eq!(rows[1], vec!["2", "3", "4", "0.5", "0", "0", "0.5", "1"]);
    }
}
