use std::io;

use thiserror::Error;

/// Errors produced by kernel operations.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("judge `{judge_id}` failed: {reason}")]
    Judge { judge_id: String, reason: String },

    #[error("dependency edge ({from}, {to}) would create a cycle")]
    Cycle { from: String, to: String },

    #[error("rejected: {0}")]
    Rejected(String),

    #[error("bundle checksum mismatch: expected {expected}, computed {actual}")]
    Checksum { expected: String, actual: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
}

impl KernelError {
    pub(crate) fn not_found(kind: &'static str, id: impl ToString) -> Self {
        KernelError::NotFound {
            kind,
            id: id.to_string(),
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        KernelError::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for KernelError {
    fn from(err: serde_json::Error) -> Self {
        KernelError::Corrupt(err.to_string())
    }
}

pub type Result<T, E = KernelError> = std::result::Result<T, E>;
