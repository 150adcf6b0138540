use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoagError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid rate policy: {0}")]
    InvalidRatePolicy(String),

    #[error("invalid initial densities: {0}")]
    InvalidInitialDensities(String),

    #[error("linear solve failed: {msg} (condition estimate {cond:.3e})")]
    LinearSolve { msg: String, cond: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoagError>;
