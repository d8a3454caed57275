use std::path::PathBuf;

use thiserror::Error;

/// Everything the command line can fail with, grouped by exit code.
#[derive(Debug, Error)]
pub enum SmoeError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: malformed file at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("incompatible inputs: {0}")]
    Mismatch(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(smoe_core::Error),
}

pub type Result<T, E = SmoeError> = std::result::Result<T, E>;

impl SmoeError {
    pub fn config(msg: impl Into<String>) -> Self {
        SmoeError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SmoeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data format, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SmoeError::Config(_) => 2,
            SmoeError::Format { .. } | SmoeError::Mismatch(_) => 3,
            SmoeError::Numeric(_) => 4,
            SmoeError::Io { .. } => 1,
            SmoeError::Core(smoe_core::Error::NonFinite(_)) => 4,
            SmoeError::Core(_) => 2,
        }
    }
}

impl From<smoe_core::Error> for SmoeError {
    fn from(e: smoe_core::Error) -> Self {
        match e {
            smoe_core::Error::NonFinite(what) => {
                SmoeError::Numeric(format!("non-finite value in {what}"))
            }
            other => SmoeError::Core(other),
        }
    }
}
