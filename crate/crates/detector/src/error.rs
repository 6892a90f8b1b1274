use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {component} at step {step}")]
    NonFinite { step: u64, component: String },
    #[error("loss diverged at step {step}: {component} = {value}")]
    Divergence { step: u64, component: String, value: f64 },
    #[error("pair {index}: main and branch annotations differ")]
    AnnotationMismatch { index: usize },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] aqua_core::Error),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;
