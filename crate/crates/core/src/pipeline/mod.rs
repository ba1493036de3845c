//! Class-incremental training: task streams, per-phase generative training,
//! synthetic resampling, classifier retraining and metric accounting.

mod algorithm;
mod audit;
mod bounds;
mod metrics;
mod sample;
mod stream;
mod train;

pub use algorithm::{
    evaluate_stage, run_algorithm1, run_algorithm1_observed, AdaptedLayers, Conditioning, ExperimentConfig, Observer,
    RunOutput, StageResult,
};
pub use audit::{forgetting_audit, Violation};
pub use bounds::{bounds_runs, multitask_classifier_scores, multitask_generative_scores, Bounds, ScoreTrack};
pub use metrics::{aa, aia, running_aa, MetricsRecord, TaskMetrics, SCHEMA_VERSION};
pub use sample::{sample_field, synthesize, Synthetic};
pub use stream::{make_task_stream, Family, StreamSpec, Task, TaskStream};
pub use train::{train_phase, PhaseConfig, PhaseStats, PhaseTrainer};

use crate::flow::FlowError;
use crate::funlora::FunLoraError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    FunLora(#[from] FunLoraError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {0} appears in more than one task")]
    OverlappingLabels(u32),
    #[error("checkpoints are not comparable: {0}")]
    FormatMismatch(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
