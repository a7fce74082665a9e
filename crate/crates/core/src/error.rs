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

    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: logarithm of non-positive value {value}")]
    LogDomain { op: &'static str, value: f64 },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("node {index} is not on this tape")]
    UnknownNode { index: usize },

    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint does not match configuration: field `{field}` is {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("mini-batch has no observed steps")]
    EmptyBatch,

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by input files rather than by the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Data(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
                | Error::ConfigMismatch { .. }
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::LogDomain { .. } | Error::UndefinedAuc(_)
        )
    }
}
