use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The variants line up with the process exit codes of the `rear` binary:
/// configuration and input errors are usage errors, I/O and training faults
/// are runtime errors, and format/checksum failures are integrity errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training fault: {0}")]
    Training(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("ingestion error at {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the command-line front end: 1 usage, 2 runtime, 3 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 1,
            Error::Integrity(_) => 3,
            _ => 2,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use input_err;
