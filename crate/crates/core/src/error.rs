use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The unstabilized exponential kernel overflowed.
    #[error("non-finite kernel entry (max logit {max_logit:.3}); use the stabilized path")]
    NonFinite { max_logit: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate normalization: denominator of row {row} is {value:e}")]
    DegenerateNormalization { row: usize, value: f64 },

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("allocation of {bytes} bytes failed")]
    Allocation { bytes: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: not a tensor file (bad magic)", path.display())]
    NotATensorFile { path: PathBuf },

    #[error("{}: unsupported tensor file version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{}: corrupt tensor file: {reason}", path.display())]
    CorruptFile { path: PathBuf, reason: String },

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from floating-point breakdown rather than
    /// bad arguments or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numerical(_) | Error::DegenerateNormalization { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::NotATensorFile { .. }
                | Error::UnsupportedVersion { .. }
                | Error::CorruptFile { .. }
        )
    }
}
