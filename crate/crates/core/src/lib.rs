//! Truncated-Fock-space simulation of a continuously monitored cavity:
//! operators, density matrices, the stochastic master equation, the
//! feedback environment and analytic baseline strategies.

pub mod baselines;
pub mod env;
pub mod error;
pub mod fock;
pub mod matrix;
pub mod sme;
pub mod state;
pub mod wigner;

pub use env::{ControlAction, EnvConfig, Environment, Observation};
pub use error::{Error, Result};
pub use matrix::ComplexMatrix;
pub use sme::{ChannelConfig, EfficiencyMode, IntegratorConfig, NoiseConfig, Scheme, SmeEngine, StepRecord};
pub use state::{fidelity, purity, DensityMatrix, TargetComponent, TargetSpec};
