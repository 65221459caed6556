use thiserror::Error;

/// Errors shared across the benchmark library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {index} ({kind}): {message}")]
    Layer {
        index: usize,
        kind: String,
        message: String,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient encountered: {0}")]
    NonFiniteGradient(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("no visible joints in sample {sample_id}")]
    NoVisibleJoints { sample_id: u64 },

    #[error("baseline metric is zero; relative score undefined")]
    ZeroBaseline,

    #[error("no candidate target pose with zero overlap ({near_misses} near misses among {candidates} candidates)")]
    NoTargetPose {
        candidates: usize,
        near_misses: usize,
    },

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
