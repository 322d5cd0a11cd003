use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported schedule pairing: {grid} time grid with {variance} variance (enable experimental pairings to allow it)")]
    UnsupportedPairing {
        grid: &'static str,
        variance: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("non-finite value encountered at sample {sample}, time index {time_index}")]
    NumericalFailure { sample: usize, time_index: usize },

    #[error("non-finite value in trajectory {0}")]
    NonFiniteTrajectory(usize),

    #[error("negative variance increment {value:e} at backward step {step}")]
    NegativeIncrement { step: usize, value: f64 },

    #[error("quadrature did not converge on [{a}, {b}]")]
    QuadratureNonConvergence { a: f64, b: f64 },

    #[error("internal consistency check failed: {0}")]
    Internal(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing component: {0}")]
    MissingComponent(&'static str),

    #[error("malformed data in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
