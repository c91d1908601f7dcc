//! State-space models, classical Bayesian filters, and the discriminative
//! Kalman filter (DKF).
//!
//! The crate is organized around a linear-Gaussian latent state
//!
//! ```text
//! Z_t = A Z_{t-1} + w_t,   w_t ~ N(0, Gamma),   Z_1 ~ N(0, S),
//! ```
//!
//! observed through an arbitrary observation model `p(x_t | z_t)`. Classical
//! filters ([`filters`]) propagate the observation model through linearization
//! (KF/EKF/IEKF), sigma points (UKF), particles, or a dense 1-D grid. The
//! discriminative filter ([`dkf`]) instead consumes a model of the *posterior*
//! `p(z_t | x_t) ~ N(f(x), Q(x))` and folds it into the same prediction
//! recursion in closed form; `f` and `Q` can be exact conditional moments
//! ([`models`]) or regressions learned from data ([`learn`]).
//!
//! All randomness flows through caller-provided seeds; every simulation,
//! fit, and filter pass is bit-reproducible.

pub mod dkf;
pub mod error;
pub mod filters;
pub mod gaussian;
pub mod learn;
pub mod linalg;
pub mod models;

pub use error::{CoreError, Result};
