use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no frames")]
    NoFrames,
    #[error("intensity {0} outside [0, 5]")]
    IntensityRange(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence too short for style: {got} frames, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// True when the failure is attributable to the caller's inputs
    /// (bad files, bad arguments) rather than to the program.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Contract(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
