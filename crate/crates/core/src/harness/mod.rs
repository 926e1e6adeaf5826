//! Experiment configuration, metrics, artifacts and self checks.

pub mod config;
pub mod metrics;
pub mod report;
pub mod selftest;

pub use config::ExperimentConfig;
pub use metrics::{hypervolume_2d, igd, mean_std, Hypervolume};
pub use report::{run_experiment, sweep, table, ExperimentOutcome, SummaryRow};
pub use selftest::{selftest, Check};
