use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ElfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step} (sample {sample})")]
    NonFiniteLoss { step: usize, sample: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e}, {} failing samples)", failing.len())]
    Convergence {
        iterations: usize,
        residual: f64,
        failing: Vec<usize>,
    },

    #[error("actnorm initialization failed: dimension {dim} has zero variance")]
    ZeroVariance { dim: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
