//! Conditional flow matching on the straight-line path between data (t = 0)
//! and Gaussian noise (t = 1), plus the ODE solvers used for sampling.

mod ema;
mod path;
mod solver;

pub use ema::EmaState;
pub use path::{cfm_loss, ot_path, PathDraws, PathSample};
pub use solver::{integrate, nfe_budget_to_steps, Method, Solution, SolverConfig};

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("adaptive step fell below {min:e} at t = {t}")]
    StepUnderflow { t: f64, min: f64 },
    #[error("vector field returned a non-finite value at t = {0}")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, FlowError>;
