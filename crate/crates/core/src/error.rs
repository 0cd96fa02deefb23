//! Error type shared across the crate.

use std::fmt;

/// Errors produced by tensor math, model IO, training and calibration.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible. Carries both shapes and the operation name.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An argument is outside its valid range.
    InvalidArgument(String),
    /// Backward called on a loss that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// Backward called on a tensor that was never recorded on the active tape.
    DetachedGraph,
    /// Backward called twice on the same tape without resetting.
    TapeConsumed,
    /// A loss term became non-finite during training.
    NonFiniteLoss { term: &'static str, value: f32 },
    /// A quantization operand is identically zero over the calibration set.
    DegenerateLayer { layer: String },
    /// Checkpoint / container decoding failure.
    Format(String),
    /// Config file parse failure.
    Config(String),
    /// Wrapped IO error with the path it happened on.
    Io { path: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::DetachedGraph => {
                write!(f, "backward target is not recorded on the active tape")
            }
            Error::TapeConsumed => {
                write!(f, "backward already ran on this tape; reset before reuse")
            }
            Error::NonFiniteLoss { term, value } => {
                write!(f, "loss term `{term}` is non-finite ({value})")
            }
            Error::DegenerateLayer { layer } => {
                write!(f, "layer `{layer}` has an all-zero operand over the calibration set")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io { path, message } => write!(f, "io error on {path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    /// Stable error-code prefix used by the CLI diagnostic stream.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::NonScalarLoss { .. } => "E_LOSS_SHAPE",
            Error::DetachedGraph => "E_DETACHED",
            Error::TapeConsumed => "E_TAPE",
            Error::NonFiniteLoss { .. } => "E_NAN",
            Error::DegenerateLayer { .. } => "E_DEGENERATE",
            Error::Format(_) => "E_FORMAT",
            Error::Config(_) => "E_CONFIG",
            Error::Io { .. } => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
