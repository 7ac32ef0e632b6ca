use std::io;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid window: width must be positive, got {0}")]
    InvalidWindow(f64),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel layout mismatch: {0}")]
    Layout(String),

    #[error("missing condition: {0}")]
    MissingCondition(&'static str),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("region of interest is empty")]
    EmptyRoi,

    #[error("invalid window plan: {0}")]
    InvalidPlan(String),

    #[error("degenerate timestep {0}: alpha_bar is zero")]
    DegenerateStep(usize),

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
