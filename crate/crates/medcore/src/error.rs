//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MedError {
    /// Tensor shapes incompatible for an op. Names the op and both shapes.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {dims:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        dims: Vec<usize>,
        reason: String,
    },

    /// NaN or Inf encountered where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown group id {0}")]
    UnknownGroup(usize),

    /// Parameter stores do not align name-for-name / dim-for-dim.
    #[error("checkpoint alignment failure: {0}")]
    Alignment(String),

    #[error("empty calibration set")]
    EmptyCalibration,

    /// Checkpoint file does not start with the MCKP magic.
    #[error("bad magic in checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("truncated checkpoint file: {0}")]
    Truncated(String),

    /// A dim product or entry in a checkpoint exceeds sane bounds.
    #[error("checkpoint dim overflow: {0}")]
    DimOverflow(String),

    /// A pruning plan cannot satisfy its budget under min-retention.
    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MedError>;
