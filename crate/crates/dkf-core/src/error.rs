use crate::gaussian::GaussianBelief;

/// Errors shared by all modeling, filtering, and learning routines.
#[derive(Debug, Clone, thiserror::Error)]
pub enum CoreError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} is not symmetric positive definite")]
    NotPositiveDefinite { what: &'static str },

    #[error("state dynamics are unstable: spectral radius {spectral_radius} >= 1")]
    UnstableDynamics { spectral_radius: f64 },

    #[error("iteration diverged after {iterations} iterations (|state| = {magnitude:.3e})")]
    Divergence {
        iterations: usize,
        magnitude: f64,
        /// Last iterate that was still finite, if one exists.
        last_stable: Option<Box<GaussianBelief>>,
    },

    #[error("all particle weights collapsed (every log-likelihood was -inf)")]
    WeightCollapse,

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("insufficient data: needed {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
