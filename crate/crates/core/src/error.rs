//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of a public operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor shapes do not agree.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A file did not match the expected on-disk format (bad magic, bad
    /// version, malformed header).
    #[error("format error: {0}")]
    Format(String),

    /// A file header promised more payload than the file contains.
    #[error("length error: {0}")]
    Length(String),

    /// Non-finite values where finite floats are required.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
