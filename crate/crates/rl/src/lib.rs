//! Policy-gradient training for the cavity feedback environment: dense
//! networks, proximal policy optimization and evaluation.

pub mod checkpoint;
pub mod error;
pub mod neural;
pub mod ppo;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use neural::{AdamState, GaussianPolicy, Mlp};
pub use ppo::{eval_seed, evaluate, EvalOptions, EvalPoint, EvalReport, PpoConfig, Trainer, UpdateStats};
