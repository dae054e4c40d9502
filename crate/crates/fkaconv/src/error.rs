use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that were expected to agree do not.
    #[error("dimension mismatch: {context} (left {left:?}, right {right:?})")]
    DimensionMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A scalar argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation received an empty input it cannot handle.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A requested sample count is incompatible with the input size.
    #[error("cardinality error: requested {requested} from {available} points")]
    Cardinality { requested: usize, available: usize },

    /// A class label is outside [0, num_classes).
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    /// backward was called on a non-scalar node.
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    /// An optimizer step found a parameter without a gradient.
    #[error("uninitialized gradient for parameter `{0}`")]
    UninitializedGradient(String),

    /// Batch statistics cannot be computed from a single row.
    #[error("degenerate batch: batch norm needs at least 2 rows in training mode, got {0}")]
    DegenerateBatch(usize),

    /// A mutation was attempted on a frozen layer.
    #[error("state error: {0}")]
    Frozen(String),

    /// Bisection could not bracket a solution.
    #[error("search failure: {0}")]
    SearchFailure(String),

    /// A configuration field is invalid.
    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A data file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn dims(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
