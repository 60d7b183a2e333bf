use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller supplied an argument that violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data (manifest, alignment, audio) is malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// A serialized artifact failed structural validation.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A serialized artifact declares a version this build does not read.
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),

    /// Model/training configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        /// Progress up to the failure, when the training loop got far enough
        /// to have one.
        report: Option<Box<crate::training::TrainReport>>,
    },

    /// No threshold satisfies the requested operating constraint.
    #[error("no operating point: {0}")]
    NoOperatingPoint(String),

    /// An operation was invoked before its prerequisites were established.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
