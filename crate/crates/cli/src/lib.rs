//! Experiment runner behind the `php-av` binary: dataset generation,
//! sequential training over task orders, reporting, ablations and
//! single-task baselines.

pub mod commands;
pub mod config;
pub mod error;
pub mod lock;
pub mod plot;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, CliResult};
