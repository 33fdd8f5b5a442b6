use std::io;

use thiserror::Error;

/// Errors produced by the recommendation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Input that violates a documented precondition (bad file, bad shape, bad flag value).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A binary container with the wrong magic bytes, version, or layout.
    #[error("bad {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    /// Preprocessing left nothing usable (for example, an empty vocabulary).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty modality")]
    EmptyModality,

    #[error("degenerate feature: zero-norm vector")]
    DegenerateFeature,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown user: {0}")]
    UnknownUser(String),

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }

    /// True when the error stems from caller-supplied input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Format { .. }
                | Error::Config(_)
                | Error::UnknownUser(_)
                | Error::Dimension(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
