use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A manifest row failed validation. `row` is 1-based and counts the header.
    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("split plan: {0}")]
    Split(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, step {step}, batch lesions {lesion_ids:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        lesion_ids: Vec<String>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("config digest mismatch in {dir}: run directory has {existing}, config has {requested}")]
    DigestMismatch {
        dir: PathBuf,
        existing: String,
        requested: String,
    },

    #[error("fetch: {0}")]
    Fetch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category name, used by the CLI and the C ABI.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::Manifest { .. } | Error::Image { .. } => ErrorCategory::Data,
            Error::InvalidParams(_) | Error::Config(_) => ErrorCategory::InvalidInput,
            Error::Split(_) => ErrorCategory::Precondition,
            Error::Shape(_) => ErrorCategory::InvalidInput,
            Error::Checkpoint(_) | Error::Fetch(_) => ErrorCategory::Checkpoint,
            Error::Training(_) | Error::NonFiniteLoss { .. } => ErrorCategory::Training,
            Error::DigestMismatch { .. } => ErrorCategory::Precondition,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ErrorCategory {
    Io = 2,
    Data = 3,
    InvalidInput = 4,
    Precondition = 5,
    Checkpoint = 6,
    Training = 7,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Io => "io",
            ErrorCategory::Data => "data",
            ErrorCategory::InvalidInput => "invalid-input",
            ErrorCategory::Precondition => "precondition",
            ErrorCategory::Checkpoint => "checkpoint",
            ErrorCategory::Training => "training",
        }
    }
}
