use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the recommendation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("config error: key `{key}` {constraint}")]
    Config { key: String, constraint: String },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("missing upstream artifact {artifact}; run stage `{stage}` first")]
    MissingArtifact { artifact: String, stage: String },

    #[error("duplicate identifier for items {first} and {second}")]
    DuplicateId { first: usize, second: usize },

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },

    #[error("lock held on {0}")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable category used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape { .. } => "shape",
            Error::Config { .. } => "config",
            Error::Artifact(_) => "artifact",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::DuplicateId { .. } => "duplicate-id",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Locked(_) => "locked",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
