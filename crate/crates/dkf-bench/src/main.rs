//! Command-line interface for the benchmark harness.
//!
//! Exit codes: 0 on success, 1 when the run finished but at least one
//! trial failed (the failures are recorded in the output rows), 2 for
//! configuration and usage errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use dkf_bench::config::BenchConfig;
use dkf_bench::csvio::{read_trajectory, write_csv, write_trajectory};
use dkf_bench::error::{BenchError, Result};
use dkf_bench::runner::{
    self, belief_rows, condense, evaluate_trial, fit_plan, metric_header, prepare_seed,
    records_to_rows, trial_seed, RunOptions, TrialRecord,
};

#[derive(Parser)]
#[command(
    name = "dkf-bench",
    about = "State-space filtering benchmarks with deterministic CSV output",
    version
)]
struct Cli {
    /// Seed override; defaults to the first seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Path to the TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path; overrides the config's experiment.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent trials.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory from the configured model and write it as CSV.
    Simulate,
    /// Fit the configured learner and dynamics from a training trajectory
    /// and write them as JSON.
    Fit,
    /// Run every configured filter over one trajectory; write a metrics CSV
    /// plus one belief-trace CSV per filter.
    Run {
        /// Re-filter a previously written trajectory CSV instead of
        /// simulating a fresh one.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Run the full filter-by-seed experiment grid and write the metrics CSV.
    Bench,
    /// Sweep feature corruption levels and write the extended metrics CSV.
    Robustness,
    /// Sweep observation counts against a dense-grid reference posterior.
    Consistency,
}

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(2);
        }
    }
}

fn belief_path(out: &Path, filter: &str) -> PathBuf {
    let sanitized = filter.replace(':', "-");
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string();
    out.with_file_name(format!("{stem}.{sanitized}.beliefs.csv"))
}

fn execute(cli: Cli) -> Result<i32> {
    if cli.threads == 0 {
        return Err(BenchError::Config("--threads must be at least 1".into()));
    }
    let config_path = cli
        .config
        .ok_or_else(|| BenchError::Config("--config is required".into()))?;
    let cfg = BenchConfig::from_path(&config_path)?;
    let out = cli
        .out
        .or_else(|| cfg.out_path())
        .ok_or_else(|| BenchError::Config("no output path: pass --out or set experiment.out".into()))?;
    let seed = cli.seed.unwrap_or(cfg.experiment.seeds[0]);
    let threads = cli.threads;

    match cli.command {
        Command::Simulate => {
            let model = cfg.model.build()?;
            let traj = dkf_core::models::simulate(
                model.state.as_dyn(),
                model.obs.as_dyn(),
                cfg.experiment.steps,
                seed,
            )?;
            write_trajectory(&out, &traj)?;
            Ok(0)
        }
        Command::Fit => {
            if cfg.experiment.train_steps < 3 {
                return Err(BenchError::Config(
                    "fit needs experiment.train_steps of at least 3".into(),
                ));
            }
            let file = runner::fit_to_file(&cfg, seed)?;
            file.save(&out)?;
            Ok(0)
        }
        Command::Run { trajectory } => run_single(&cfg, seed, trajectory.as_deref(), &out),
        Command::Bench => {
            let outcome = runner::run_experiment(&cfg, threads)?;
            write_csv(&out, &outcome.header, &outcome.rows)?;
            Ok(if outcome.any_error { 1 } else { 0 })
        }
        Command::Robustness => {
            let outcome = runner::run_robustness(&cfg, threads)?;
            write_csv(&out, &outcome.header, &outcome.rows)?;
            Ok(if outcome.any_error { 1 } else { 0 })
        }
        Command::Consistency => {
            let outcome = runner::run_consistency(&cfg, threads)?;
            write_csv(&out, &outcome.header, &outcome.rows)?;
            Ok(0)
        }
    }
}

/// One seed, every filter, with belief traces: the `run` subcommand body.
fn run_single(
    cfg: &BenchConfig,
    seed: u64,
    trajectory: Option<&Path>,
    out: &Path,
) -> Result<i32> {
    let model = cfg.model.build()?;
    let plan = fit_plan(cfg)?;
    let mut data = prepare_seed(cfg, &model, &plan, seed)?;
    if let Some(path) = trajectory {
        let traj = read_trajectory(path)?;
        if traj.state_dim() != model.state.dim() || traj.obs_dim() != data.test.obs_dim() {
            return Err(BenchError::Config(format!(
                "trajectory in {} is {}-state/{}-observation but the model is {}/{}",
                path.display(),
                traj.state_dim(),
                traj.obs_dim(),
                model.state.dim(),
                data.test.obs_dim()
            )));
        }
        data.test = traj;
    }
    let opts = RunOptions::from_config(cfg, true)?;
    let filters = cfg.filters();
    let mut records = Vec::with_capacity(filters.len());
    for filter in &filters {
        let name = filter.name();
        let metrics = match runner::run_filter(
            filter,
            &model,
            &data,
            &opts,
            trial_seed(seed, 0, &name),
        ) {
            Ok(trial) => {
                let (header, rows) = belief_rows(&trial)?;
                write_csv(&belief_path(out, &name), &header, &rows)?;
                evaluate_trial(&trial, &data.test.states).map_err(condense)
            }
            Err(err) => Err(condense(err)),
        };
        records.push(TrialRecord {
            filter: name,
            seed,
            metrics,
        });
    }
    let (rows, any_error) = records_to_rows(&records, &filters);
    write_csv(out, &metric_header(), &rows)?;
    Ok(if any_error { 1 } else { 0 })
}
