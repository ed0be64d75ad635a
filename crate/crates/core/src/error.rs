use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid population: {0}")]
    Population(String),

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {t} is outside [1, {max}]")]
    StepOutOfRange { t: usize, max: usize },

    #[error("component {k} is empty (effective count {count:.3e})")]
    EmptyComponent { k: usize, count: f64 },

    #[error("attribute assignment failed: {0}")]
    Assignment(String),

    #[error("ambiguous component naming: {0}")]
    AmbiguousNaming(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("report schema version {found} does not match {expected}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Population(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::SchemaVersion { .. } => 4,
            _ => 3,
        }
    }
}
