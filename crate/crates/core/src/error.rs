use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value produced by `{op}` at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("backward already ran on this tape; record a new tape")]
    AlreadyBackpropagated,

    #[error("parameter {0} has no gradient; run backward first")]
    MissingGrad(usize),

    #[error("internal autograd error: {0}")]
    Internal(String),

    #[error("energy overflow: logit {logit} (class {class}) / c_scale {c_scale} exceeds exp range")]
    EnergyOverflow {
        class: usize,
        logit: f64,
        c_scale: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sampler chain aborted at iteration {iteration}: {reason}")]
    ChainAborted { iteration: usize, reason: String },

    #[error("{failed} of {total} chains failed (indices {indices:?}): {first}")]
    BatchFailed {
        total: usize,
        failed: usize,
        indices: Vec<usize>,
        first: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
