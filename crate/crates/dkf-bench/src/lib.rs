//! Benchmark harness for the filtering crates: model construction from
//! TOML configs, trajectory simulation, filter execution, metric
//! reporting, and deterministic CSV output.

pub mod config;
pub mod csvio;
pub mod error;
pub mod metrics;
pub mod model_file;
pub mod runner;

pub use config::{BenchConfig, BuiltModel, FilterSpec};
pub use error::{BenchError, Result};
