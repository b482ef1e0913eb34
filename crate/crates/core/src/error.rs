use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("no anchors: {0}")]
    EmptyAnchors(String),
    #[error("invalid budget: {requested} samples requested from {available} points")]
    InvalidBudget { requested: usize, available: usize },
    #[error("ply: {0}")]
    Ply(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("render aborted: non-finite attribute in gaussian {0}")]
    NonFiniteGaussian(usize),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("pfm: {0}")]
    Pfm(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
