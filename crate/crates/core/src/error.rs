use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid mixing matrix: {0}")]
    InvalidMixing(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("chain not irreducible: {0}")]
    NotIrreducible(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("wrong sampling kernel: expected {expected:?}, got {got:?}")]
    WrongKernel {
        expected: crate::mdp::Kernel,
        got: crate::mdp::Kernel,
    },

    #[error("infeasible batch schedule: {0}")]
    InfeasibleSchedule(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
