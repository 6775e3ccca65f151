use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward called on a tape whose graph was already released")]
    TapeFreed,

    #[error("jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("header/payload mismatch: {0}")]
    HeaderMismatch(String),

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("checkpoint incompatible with configuration: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: u64,
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the root cause is a numerical failure (non-finite loss or
    /// gradient) rather than a usage or I/O problem.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss => true,
            Error::NoConvergence { .. } => true,
            Error::Step { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::TruncatedPayload { .. }
            | Error::HeaderMismatch(_)
            | Error::CrcMismatch { .. } => true,
            Error::Step { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
