//! Generative evolutionary optimization.
//!
//! A pool of generator networks is evolved by mutating each sampled parent
//! through gradient descent on per-objective critic networks, then keeping the
//! best generators by non-dominated sorting. Baselines (real-coded GA,
//! CMA-ES, a local surrogate method) and a benchmark harness live alongside.

pub mod error;
pub mod evolution;
pub mod harness;
pub mod models;
pub mod nn;
pub mod optimizers;
pub mod problems;
pub mod surrogate;

pub use error::{Error, Result};

/// A point in the search space.
pub type SearchPoint = Vec<f64>;
/// Objective values of one point, all minimized.
pub type ObjectiveVector = Vec<f64>;
