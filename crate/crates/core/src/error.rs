use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can surface.
///
/// The variants fall into the process exit classes used by the CLI:
/// validation (1), computation (2) and I/O (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("computation failed: {0}")]
    Computation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("cannot encode character {0:?}: not in vocabulary")]
    Encoding(char),

    #[error("{}line {line}: {msg}", source_prefix(.path))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        msg: String,
    },

    #[error("{}line {line}: {msg}", source_prefix(.path))]
    Validation {
        path: Option<PathBuf>,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn source_prefix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!("{}: ", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Encoding(_)
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::UndefinedMetric(_) => 1,
            Error::NotPositiveDefinite { .. } | Error::Computation(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}
