use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no valid candidate lines: {0}")]
    EmptyCandidates(String),

    #[error("degenerate line: {0}")]
    DegenerateLine(String),

    #[error("degenerate pooling region: {0}")]
    DegenerateRegion(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::DegenerateLine(_)
            | Error::DegenerateRegion(_)
            | Error::EmptyCandidates(_)
            | Error::Dimension(_) => 3,
            Error::Config(_) => 4,
            Error::Training { .. } | Error::Numeric(_) => 5,
            Error::Parse { .. } => 6,
            Error::Io { .. } => 7,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
