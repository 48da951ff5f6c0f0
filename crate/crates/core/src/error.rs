//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by dataset construction, codecs, distillation, and file IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error on axis {axis}: {msg}")]
    Shape { axis: &'static str, msg: String },

    #[error("class {class} has no items; cannot initialize synthetic set")]
    EmptyClass { class: usize },

    #[error("codec training diverged at step {step}; last finite loss {last_loss}")]
    TrainingDiverged { step: usize, last_loss: f32 },

    #[error("distance matrix is constant; correlation is undefined")]
    UndefinedCorrelation,

    #[error("gradient lists have mismatched structure: {0}")]
    GradStructure(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("degenerate trajectory: start and target snapshots coincide")]
    DegenerateTrajectory,

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("parameter vector length {got} does not match network size {expected}")]
    ParamLength { expected: usize, got: usize },

    #[error("graph memory {used} bytes exceeds guard {limit} bytes; reduce student steps or batch size")]
    MemoryGuard { used: usize, limit: usize },

    #[error("unknown augmentation policy '{0}'")]
    UnknownPolicy(String),

    #[error("file format error in {path}: {msg}")]
    FileFormat { path: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
