use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("Fock cutoff must be at least 2, got {0}")]
    CutoffTooSmall(usize),

    #[error("Fock index {index} out of range for cutoff {dim}")]
    FockIndexOutOfRange { index: usize, dim: usize },

    #[error("expected {expected} entries, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("integrator instability: smallest eigenvalue {min_eigenvalue:.3e} below -1e-6")]
    IntegratorInstability { min_eigenvalue: f64 },

    #[error("action has {got} components, expected {expected}")]
    ActionLength { expected: usize, got: usize },

    #[error("episode already finished; call reset first")]
    EpisodeFinished,
}
