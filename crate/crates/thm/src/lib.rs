//! Experiment harness: configuration files, sweeps over meshes, degrees,
//! variants and material parameters, and CSV reports.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind};
pub use experiment::{RunResult, RunStatus, run_experiment};
