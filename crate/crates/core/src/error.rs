//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Invalid function argument (preconditions like n >= 2 or k <= n).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Data fails a structural invariant (duplicate ids, unlabeled
    /// solutions, malformed groups).
    #[error("validation error: {0}")]
    Validation(String),

    /// The host environment cannot run the requested operation (missing
    /// interpreter, sandbox setup failure). Never conflated with a verdict.
    #[error("environment error: {0}")]
    Environment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite loss or gradient during training; the message carries a
    /// diagnostic dump of the offending group.
    #[error("non-finite training signal: {0}")]
    NonFinite(String),

    /// The offline contract was broken: a verifier execution or a policy
    /// sampling call happened inside a training step.
    #[error("offline contract violation: {0}")]
    Contract(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt { path: path.into(), source }
    }

    /// Stable category tag for machine-readable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::IoAt { .. } => "io",
            Error::Argument(_) => "argument",
            Error::Validation(_) => "validation",
            Error::Environment(_) => "environment",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "non_finite",
            Error::Contract(_) => "contract",
            Error::Json(_) => "json",
        }
    }
}
