use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulation, training and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Input data is unusable (non-finite pixels, empty datasets, unnormalized latents).
    #[error("invalid data: {0}")]
    Data(String),
    /// A model or schedule is in a state that does not permit the operation.
    #[error("invalid state: {0}")]
    State(String),
    /// A file on disk does not match its declared layout.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
    /// A pipeline stage failed; `stage` names it.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable code, used as the process exit status by the CLI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 2,
            Error::Data(_) => 3,
            Error::State(_) => 4,
            Error::Corrupt { .. } => 5,
            Error::Io { .. } => 6,
            Error::Serde(_) => 7,
            Error::Stage { source, .. } => source.code(),
        }
    }

    /// Short kind label matching [`Error::code`].
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Data(_) => "data",
            Error::State(_) => "state",
            Error::Corrupt { .. } => "corrupt",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
            Error::Stage { source, .. } => source.kind(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
