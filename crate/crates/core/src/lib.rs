//! Functional rank-1 adapters on a conditional flow-matching model, trained
//! class-incrementally.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod flow;
pub mod funlora;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod runner;
pub mod tensor;
