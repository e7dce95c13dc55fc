//! Error taxonomy shared across the crate.
//!
//! The CLI maps these onto process exit codes: config errors to 2, data
//! errors to 3, numeric failures (including divergence) to 4.

use thiserror::Error;

/// Errors raised while parsing or validating datasets and labels.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{id}: {msg}")]
    Schema { id: String, msg: String },

    #[error("unknown {kind} label {name:?}; expected one of {expected:?}")]
    Vocabulary {
        kind: &'static str,
        name: String,
        expected: Vec<String>,
    },

    #[error("emotion index {index} out of range for scheme with {count} emotions")]
    EmotionOutOfRange { index: usize, count: usize },

    #[error("intensity {0} outside [-3, 3]")]
    IntensityOutOfRange(f64),

    #[error("utterance {utterance}: sentiment label required but absent")]
    MissingSentiment { utterance: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors from the numeric substrate: shape mismatches and contract breaks.
#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{0}")]
    Contract(String),
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(#[from] DataError),

    #[error("numeric error: {0}")]
    Numeric(#[from] NumericError),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI reports for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) | Error::Diverged { .. } => 4,
        }
    }
}
