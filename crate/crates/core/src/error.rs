use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("finite-difference probe evaluated non-finite at coordinate {0}")]
    NonFiniteProbe(usize),

    #[error("empty sequence in {0}")]
    EmptySequence(&'static str),

    #[error("branch widths differ: video {video}, skeleton {skeleton}")]
    WidthMismatch { video: usize, skeleton: usize },

    #[error("baseline '{0}' missing from results")]
    MissingBaseline(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (sample {sample}): {loss}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        sample: usize,
        loss: f64,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
