// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors produced by the decomposition toolkit.
#[derive(Debug, thiserror::Error)]
pub enum RotateError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// All considered entries are equal, so standardized moments are undefined.
    #[error("degenerate distribution: zero variance (mean {mean})")]
    DegenerateDistribution { mean: f64 },

    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    EmptySet(&'static str),

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RotateError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Self::NonFinite(_) | Self::DegenerateDistribution { .. } | Self::Io { .. }
        )
    }
}

pub type Result<T, E = RotateError> = std::result::Result<T, E>;
