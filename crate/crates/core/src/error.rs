use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("no valid CTC alignment: {frames} frames cannot emit {labels} labels")]
    NoAlignment { frames: usize, labels: usize },

    #[error("session too short for a single keystroke ({duration_s} s)")]
    EmptySession { duration_s: f64 },

    #[error("refused: {0}")]
    Refused(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("corrector transport failed: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// True for errors that indicate a broken internal invariant rather than
    /// bad user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Contract(_) | Error::Diverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
