use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmrError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported kernel width {0}: width must be odd and at least 3")]
    UnsupportedWidth(usize),

    #[error("ring count {0} leaves ring spacing undefined (need at least 2 rings)")]
    DegenerateGeometry(usize),

    #[error("{n} rings exceed the resolution of a width-{k} kernel (max {max})")]
    OverResolution { n: usize, k: usize, max: usize },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("architecture rule violated: {0}")]
    Architecture(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GmrError> = std::result::Result<T, E>;
