//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the engine.
///
/// The variants map onto the CLI exit codes: `Config`/`Input` are caller
/// mistakes (exit 2), `Io` is a filesystem problem (exit 3), and `Internal`
/// indicates a broken invariant inside the engine (exit 1).
#[derive(Debug, Error)]
pub enum EdlmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EdlmError>;

impl EdlmError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Self::Internal(msg.into())
    }
}
