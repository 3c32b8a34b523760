//! Configuration, experiment driver and oracle self-tests behind the `msr`
//! command.

pub mod config;
pub mod error;
pub mod experiment;
pub mod selftest;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
