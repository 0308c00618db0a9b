//! Dense `f64` tensors, forward kernels, a reverse-mode tape and a
//! central-difference gradient oracle.

mod finite_diff;
pub mod kernels;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error};
pub use kernels::{log_sum_exp, AttnMask};
pub use tape::{Gradients, Graph, NodeId, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite loss {value} while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize, value: f64 },
}
