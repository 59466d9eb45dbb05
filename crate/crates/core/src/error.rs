//! Workspace-wide error type with process exit-code mapping.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: invalid option values, version mismatches, missing state.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied value outside its documented domain.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor or image dimensions do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (e.g. pushing an unflagged verdict).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dataset content problems: missing splits, bad label files.
    #[error("data error: {0}")]
    Data(String),

    /// Directory ingestion failed.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A loss or gradient became non-finite; `term` names the offending part.
    #[error("numerical failure in {term}: {detail}")]
    Numerical { term: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 0 success, 2 config error, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Shape(_)
            | Error::Contract(_) => 2,
            Error::Data(_) | Error::Ingestion(_) | Error::Io { .. } => 3,
            Error::Numerical { .. } | Error::Diverged { .. } => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numerical(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            term: term.into(),
            detail: detail.into(),
        }
    }
}
