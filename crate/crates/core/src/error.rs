//! Workspace-wide error type.
//!
//! Everything fallible returns [`Result`]. Variants are grouped by failure
//! class rather than by module so callers can match on what went wrong
//! (bad input vs. bad file vs. bad math) without caring where.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmptError {
    /// Caller-supplied data violated a precondition. The message names the
    /// offending field, label, or pair.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A configuration file or struct failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Tensor or token-sequence shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An operation was called outside its legal protocol (e.g. backward
    /// before forward, output space requested before splits are assigned).
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A persisted artifact is truncated, tampered with, or inconsistent
    /// with its manifest.
    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MmptError>;

impl MmptError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MmptError::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MmptError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        MmptError::Shape(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        MmptError::Protocol(msg.into())
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        MmptError::Corrupt(msg.into())
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        MmptError::NonFinite(msg.into())
    }
}
