//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph loading, model construction, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Tab-separated input line did not have the expected field count.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Token not present in a frozen vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Operation applied to an object in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// Tensor or vector shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Algebra kinds disagree or the width is invalid for the kind.
    #[error("rejected input: {0}")]
    Rejected(String),

    /// Index outside the valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A loss or state became NaN/Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint file malformed or incompatible with the current config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
