use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid network architecture: {0}")]
    Architecture(String),

    #[error("expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("environment {index} failed: {source}")]
    Env { index: usize, source: fock_core::Error },

    #[error("non-finite loss at update {update}")]
    NonFiniteLoss { update: usize },

    #[error(transparent)]
    Core(#[from] fock_core::Error),
}
