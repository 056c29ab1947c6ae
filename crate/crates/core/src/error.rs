//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument (axis out of range, bad factor, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// File does not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: &'static str },

    /// Unsupported format version.
    #[error("unsupported version {found} in {path} (expected {expected})")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },

    /// Header declares more payload than the file contains.
    #[error("truncated payload in {path}: {detail}")]
    Truncated { path: String, detail: String },

    /// Training diverged.
    #[error("non-finite loss at step {step}: rec={rec} commit={commit} total={total}")]
    NonFiniteLoss {
        step: usize,
        rec: f64,
        commit: f64,
        total: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
