use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("tensors belong to different tapes (op {op})")]
    TapeMismatch { op: &'static str },

    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    InvalidCost { row: usize, col: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("misaligned inputs: {0}")]
    Alignment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("json parse error at byte offset {offset}: {msg}")]
    JsonParse { offset: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, image {image_index}; diagnostics written to {dump_path}")]
    NonFiniteLoss {
        epoch: usize,
        image_index: usize,
        dump_path: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable error category for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. }
            | Error::AxisOutOfRange { .. }
            | Error::InvalidArgument { .. }
            | Error::TapeMismatch { .. } => "shape",
            Error::InvalidCost { .. } | Error::UndefinedMetric(_) => "metric",
            Error::Alignment(_) => "alignment",
            Error::Config(_) => "config",
            Error::Data(_) | Error::JsonParse { .. } => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "training",
            Error::Io(_) => "io",
        }
    }
}
