//! Dense double-precision tensors with a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_mutation, GradCheckReport};
pub use tape::{BackwardMutation, Gradients, Tape, Var, RMSNORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::silu;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("graph error: {0}")]
    Graph(String),
}
