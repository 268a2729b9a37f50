use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    DimensionMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sample {utt_id}: {reason}")]
    Sample { utt_id: String, reason: String },

    #[error("bad binary file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("training diverged in stage {stage}, epoch {epoch}: {reason}")]
    Diverged {
        stage: u8,
        epoch: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::DimensionMismatch {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Whether the error stems from invalid user input (config, manifest,
    /// arguments) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::Sample { .. }
                | Error::Manifest { .. }
                | Error::Format { .. }
                | Error::DimensionMismatch { .. }
        )
    }
}
