use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination of values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied an input that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Dataset content that cannot be used (empty masks, nonpositive depth, missing labels).
    #[error("data error: {0}")]
    Data(String),

    /// Shape or width mismatch between composed stages.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite loss or prediction.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("listing {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("sample {id}: {msg}")]
    Sample { id: String, msg: String },

    #[error("checkpoint {path}: {msg} (at byte offset {offset})")]
    Checkpoint { path: PathBuf, offset: u64, msg: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint config hash {found} differs from the active config hash {expected}; pass the override flag to load anyway")]
    ConfigMismatch { expected: String, found: String },

    #[error("checkpoint arrays do not match the model:\n{0}")]
    ShapeMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ConfigMismatch { .. }
            | Error::ShapeMismatch(_)
            | Error::CheckpointVersion { .. } => 2,
            Error::Input(_)
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Sample { .. }
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Checkpoint { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Contract(_) | Error::Tensor(_) | Error::Json(_) => 1,
        }
    }
}
