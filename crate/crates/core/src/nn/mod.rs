//! Minimal differentiable building blocks: a dense matrix, a few layers with hand-written
//! backward passes, a parameter store, an operation tape and a finite-difference checker.

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, relative_error, FdReport};
pub use ops::{conv1d, linear, log_softmax_rows, relu, sigmoid};
pub use params::{Param, ParamSet};
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor2;

use crate::cif::CifError;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Cif(#[from] CifError),
}
