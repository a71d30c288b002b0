//! Configuration-driven experiment runner for the continual semi-supervised
//! learning library.

pub mod config;
pub mod run;

pub use config::{resolve, ConfigError, ExperimentConfig, Overrides, Resolved};
pub use run::{report, run_experiment, ExperimentOutcome, MethodSummary, RunError, SeedSummary};
