use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch normalization in train mode needs at least 2 rows per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("infeasible category mix: {0}")]
    InfeasibleMix(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {found} (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
