//! Experiment orchestration for the Fock-state feedback simulator: run
//! configuration, training, evaluation, sweeps, policy maps and baselines.

pub mod baseline;
pub mod config;
pub mod error;
pub mod eval;
pub mod map;
pub mod output;
pub mod sweep;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
