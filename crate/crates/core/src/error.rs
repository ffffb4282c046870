use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node index {index} out of range for a grid of {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("sensor index {0} appears more than once")]
    DuplicateIndex(usize),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("reference field has zero norm")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate data: every snapshot secant has zero norm")]
    DegenerateData,

    #[error("degenerate ensemble: every pair of estimates coincides")]
    DegenerateEnsemble,

    #[error("degenerate score: all Christoffel scores are zero")]
    DegenerateScore,

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding snapshot, score or selection files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: not a CSNAP1 file")]
    BadMagic,

    #[error("unsupported CSNAP version {0}")]
    UnsupportedVersion(u32),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("truncated payload: header implies {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },

    #[error("malformed csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(FormatError::Csv(format!("{other:?}"))),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
