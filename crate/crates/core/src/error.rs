use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the style-transfer pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("empty corpus: {}", .0.display())]
    EmptyCorpus(PathBuf),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::DegenerateInput(_) => 3,
            Error::InvalidState(_) => 4,
            Error::EmptyCorpus(_) => 5,
            Error::NonFinite(_) => 6,
            Error::Io { .. } => 7,
            Error::Checkpoint(_) => 8,
            Error::Config(_) => 9,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
