use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CenError {
    #[error("no foreground points")]
    NoForegroundPoints,
    #[error("empty spine mask")]
    EmptySpineMask,
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("channel {channel} out of range for map with {channels} channels")]
    InvalidChannel { channel: usize, channels: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty RoI")]
    EmptyRoi,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty evaluation set")]
    EmptyEvaluationSet,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CenError>;
