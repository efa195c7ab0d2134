use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] neuroadapt_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON at `{at}`: {message}")]
    Json { path: PathBuf, at: String, message: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid plan: {0}")]
    Validation(String),

    #[error("unmatched records (no No-TTA partner with the same checkpoint): {}", .0.join("; "))]
    Orphans(Vec<String>),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        HarnessError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
