//! Config-driven harness: data generation, training, sampling runs, sweeps
//! and reports.

pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod experiment;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
