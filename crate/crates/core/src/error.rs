use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty waveform")]
    EmptyWaveform,

    #[error("unsupported number: {0}")]
    UnsupportedNumber(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A text file did not follow its documented format.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("parameter `{name}`: {msg}")]
    Parameter { name: String, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),

    #[error("stage {index} ({kind}) failed: {source}")]
    Stage {
        index: usize,
        kind: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when the error stems from bad input or configuration rather than
    /// from the environment (file system, codec failures).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Wav(_) => false,
            Error::Stage { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}
