//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor construction or an op received incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Convolution/pooling geometry that cannot be realized.
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// Architecture or dataset configuration rejected at validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Binary record or config file decoding failure.
    #[error("decode error: {0}")]
    Decode(String),

    /// Checkpoint serialization problems (bad magic, truncation, ...).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A gradient tape was replayed twice without a reset.
    #[error("tape already replayed; call reset() before replaying again")]
    TapeReplayed,

    /// NaN or infinity showed up where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
