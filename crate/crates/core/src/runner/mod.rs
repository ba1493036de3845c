//! Configuration-driven experiment commands and their file outputs.

mod commands;
mod config;
mod output;

pub use commands::{
    cmd_analyze_rank, cmd_bounds, cmd_continual, cmd_importance, cmd_nfe_sweep, cmd_report, ContinualResult, ReportRow,
    Stat, Summary, SweepRow,
};
pub use config::{parse_config, RunConfig};
pub use output::{canonical_json, default_out_root, RunManifest, StepTime, ARTIFACT_VERSION, OUT_ENV};

use crate::funlora::FunLoraError;
use crate::model::ModelError;
use crate::pipeline::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    FunLora(#[from] FunLoraError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, RunnerError>;
