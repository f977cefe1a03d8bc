//! Synthetic corpus, file formats, configuration and the three-stage
//! training pipeline.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod io;
pub mod pipeline;

use crate::grpo::GrpoError;
use crate::metrics::MetricError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing: {0}")]
    Missing(String),
    #[error("format: {0}")]
    Format(String),
    #[error("stage: {0}")]
    Stage(String),
    #[error("non-finite loss in {stage} at step {step}")]
    NonFinite { stage: &'static str, step: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

impl HarnessError {
    /// Short machine-readable kind for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Missing(_) => "missing",
            HarnessError::Format(_) => "format",
            HarnessError::Stage(_) => "stage",
            HarnessError::NonFinite { .. } => "non_finite",
            HarnessError::Io(_) => "io",
            HarnessError::Tensor(_) => "tensor",
            HarnessError::Metric(_) => "metric",
            HarnessError::Grpo(_) => "rl",
        }
    }
}
