use thiserror::Error;

/// Errors shared across the pipeline. The CLI maps these onto exit codes:
/// configuration problems → 2, data/format problems → 3, leakage and
/// split-assertion failures → 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("direct-path sync failed: {0}")]
    SyncFailure(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("train/test leakage: {0}")]
    Leakage(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Leakage(_) => 4,
            _ => 3,
        }
    }
}
