//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised by configuration, data handling, model assembly and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// One or more configuration problems, collected before reporting.
    #[error("invalid configuration:\n{}", .0.iter().map(|s| format!("  - {s}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<String>),

    /// A key that is not part of the configuration schema.
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    /// Tensor or argument shapes that do not match an operation's contract.
    #[error("{op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    /// Dataset node count disagrees with the configured node count.
    #[error("node count mismatch: config says {config} nodes, dataset has {dataset}")]
    NodeCountMismatch { config: usize, dataset: usize },

    /// Problems reading or interpreting dataset files.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint directory missing, malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged; names the first tensor that went non-finite.
    #[error("training diverged: first non-finite tensor is `{tensor}` (epoch {epoch}, batch {batch})")]
    Diverged {
        tensor: String,
        epoch: usize,
        batch: usize,
    },

    /// A required file was not found.
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
