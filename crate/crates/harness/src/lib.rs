//! Experiment harness: configuration, seeded parallel execution, reproduction
//! subcommands and CSV/JSON output.

pub mod config;
pub mod error;
pub mod experiment;
pub mod reproduce;

pub use config::{ExperimentConfig, InstanceSource};
pub use error::{HarnessError, Result};
