//! Conditional vector-field network with per-class adapters, a small
//! classifier, and checkpoints.

mod checkpoint;
mod classifier;
mod conv;
mod dense;
mod vector_field;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use classifier::{classifier_eval, classifier_train, ClassifierConfig, ClassifierNet};
pub use conv::TinyConvLayer;
pub use dense::Dense;
pub use vector_field::{time_features, ClassField, NetConfig, ParamRef, Phase, Route, VectorFieldNet};

use crate::flow::FlowError;
use crate::funlora::FunLoraError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    FunLora(#[from] FunLoraError),
    #[error("unknown class label {0}")]
    UnknownLabel(u32),
    #[error("refusing to train frozen parameters: {0}")]
    Frozen(String),
    #[error("batch mixes classes that are conditioned differently")]
    MixedRoutes,
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint format {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint io: {0}")]
    Io(String),
}

impl From<ModelError> for FlowError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => FlowError::Tensor(t),
            other => FlowError::Invalid(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
