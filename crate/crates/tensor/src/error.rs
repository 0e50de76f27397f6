use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on a value that does not require grad")]
    NoGradPath,

    #[error("unknown op `{0}`")]
    UnknownOp(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("parameter `{0}` not found")]
    UnknownParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
