use std::path::PathBuf;

/// Errors raised anywhere in the sampling lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("vocabulary error: unknown token `{0}`")]
    Vocabulary(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("format error in {what}: {reason}")]
    Format { what: String, reason: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn cache(msg: impl Into<String>) -> Self {
        Error::Cache(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 configuration, 3 numeric/training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Numeric(_) | Error::Training { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
