// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by tensor operations, model I/O and the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A caller-supplied argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An index (class label, tap point, neuron, instance) is out of range.
    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed binary container (checkpoint) contents.
    #[error("format error: {0}")]
    Format(String),

    /// Malformed `.ts` dataset file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}
