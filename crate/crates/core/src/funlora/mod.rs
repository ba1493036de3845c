//! Functional rank-1 adapters.
//!
//! Each adapter holds a column `A` (length `C_out`) and a row `B` (length
//! `C_in`). The update matrix is a weighted average of `p` functions of the
//! pair, `F = (1/p) Σ α_i f_i(A, B)`, which lifts the rank above one while
//! keeping the parameter count linear in the layer width.

mod adapter;
mod diagnostics;
mod export;
mod reduce;
mod store;

pub use adapter::{
    combine, combine_on_tape, conv_modulate, conv_modulate_on_tape, f_rshift, init_adapter, rshift, Adapter,
    AdapterSpec, AdapterVars, Combine, Expand, FunctionalKind, Initialized,
};
pub use diagnostics::{
    importance, importance_avg, importance_report, param_count, rank_report, select_layers, ImportanceReport,
    LayerStrategy, RankEntry, RankReport,
};
pub use export::{importance_csv, ponderation_csv, rank_csv, IMPORTANCE_HEADER, PONDERATION_HEADER, RANK_HEADER};
pub use reduce::{expand_duplicate, reduced_dims, sqrt_factorize, SqrtPlan, SqrtSegment};
pub use store::{AdapterStore, LayerShape, Layout};

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunLoraError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
    #[error("class {0} belongs to a completed task and is frozen")]
    Frozen(u32),
    #[error("class {0} has no adapter")]
    UnknownClass(u32),
    #[error("class {0} already has adapters")]
    DuplicateClass(u32),
    #[error("importance assumes ones-initialized multiplicative adapters, found {0:?} combine")]
    NotMulConvention(Combine),
    #[error("layer selection is empty")]
    EmptySelection,
}

pub type Result<T> = std::result::Result<T, FunLoraError>;
