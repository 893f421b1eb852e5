use std::io;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, one per process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Config,
    Data,
    Numerical,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Io => 1,
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numerical => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward already ran on this tape; call reset() first")]
    BackwardTwice,
    #[error("index error: {0}")]
    Index(String),
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("bundle error: {0}")]
    Bundle(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension(_)
            | Error::Domain(_)
            | Error::DegenerateVector(_)
            | Error::NonFinite(_)
            | Error::BackwardTwice
            | Error::Index(_)
            | Error::GradientCheck(_) => ErrorCategory::Numerical,
            Error::Config(_) | Error::Json(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Bundle(_) => ErrorCategory::Data,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
