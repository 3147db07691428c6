use std::path::PathBuf;

use thiserror::Error;

use crate::refine::PhraseKey;

pub type Result<T, E = AbeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AbeError {
    /// A vector with zero norm reached a cosine computation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid top-k size {k} for {n} candidates")]
    InvalidK { k: usize, n: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Structural problem with an embedding value (shape, non-finite entries, spans).
    #[error("invalid embedding `{id}`: {reason}")]
    InvalidEmbedding { id: String, reason: String },

    #[error("bundle {}: {reason}", path.display())]
    Bundle { path: PathBuf, reason: String },

    #[error("{}:{line}: {reason}", path.display())]
    Record {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("caption mismatch for `{id}`")]
    CaptionMismatch { id: String },

    #[error("caption structure `{0}` has unresolved token spans")]
    Unresolved(String),

    #[error("missing {} phrase table entries (first: {})", .0.len(), .0.first().map(|k| k.to_string()).unwrap_or_default())]
    MissingPhrases(Vec<PhraseKey>),

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AbeError {
    pub(crate) fn bundle(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        AbeError::Bundle {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn record(path: impl Into<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        AbeError::Record {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(id: &str, reason: impl Into<String>) -> Self {
        AbeError::InvalidEmbedding {
            id: id.to_string(),
            reason: reason.into(),
        }
    }
}
