//! Experiment driver: dataset generation, prior training, filter runs and reporting.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod results;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
