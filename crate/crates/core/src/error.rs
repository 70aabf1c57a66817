//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SgnError>;

#[derive(Debug, Error)]
pub enum SgnError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("flow diverged at step {step}: non-finite state")]
    Divergence { step: usize },

    #[error("flow diverged for sample {sample} at step {step}")]
    SampleDivergence { sample: usize, step: usize },

    #[error("flow exceeded max_steps = {max}")]
    MaxStepsExceeded { max: usize },

    #[error("too many divergent samples in batch: {skipped} of {total}")]
    TooManyDivergentSamples { skipped: usize, total: usize },

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("operation requires {expected} decoder mode")]
    WrongDecoderMode { expected: &'static str },

    #[error("csv error at line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SgnError {
    pub fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        SgnError::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        SgnError::InvalidArgument(msg.into())
    }
}
