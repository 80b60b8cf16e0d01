//! Library-wide error type, grouped by failure class so the CLI can map
//! each class to a distinct exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoltError {
    /// Shape or dimension mismatch in tensor computation. Carries the path
    /// of the offending graph node when raised during a forward/backward pass.
    #[error("shape error at {node}: {msg}")]
    Shape { node: String, msg: String },

    /// Non-finite value produced during computation; fail fast instead of
    /// letting NaN propagate.
    #[error("non-finite value at {node}: {msg}")]
    NonFinite { node: String, msg: String },

    /// Invalid configuration (bad key, out-of-range value, violated invariant).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset loading / sample validation problems.
    #[error("data error: {0}")]
    Data(String),

    /// Scheduler state violations (non-monotone steps, missing history, ...).
    #[error("scheduler error: {0}")]
    Scheduler(String),

    /// Checkpoint container problems (corrupt manifest, name/shape mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Evaluation-time problems (empty pools, decode failures).
    #[error("eval error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MoltError {
    pub fn shape(node: impl Into<String>, msg: impl Into<String>) -> Self {
        MoltError::Shape { node: node.into(), msg: msg.into() }
    }

    pub fn non_finite(node: impl Into<String>, msg: impl Into<String>) -> Self {
        MoltError::NonFinite { node: node.into(), msg: msg.into() }
    }

    /// Exit code for the CLI: one code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            MoltError::Config(_) => 3,
            MoltError::Data(_) | MoltError::Io(_) => 4,
            MoltError::Shape { .. } | MoltError::NonFinite { .. } => 5,
            MoltError::Checkpoint(_) => 6,
            MoltError::Scheduler(_) => 7,
            MoltError::Eval(_) => 8,
        }
    }
}

pub type Result<T, E = MoltError> = std::result::Result<T, E>;
