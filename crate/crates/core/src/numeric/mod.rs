//! Dense tensors, a reverse-mode tape and a finite-difference gradient checker.

mod gradcheck;
pub(crate) mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{AttentionLayout, Gradients, Graph, Var};
pub use tensor::{softmax_in_place, Scalar, Tensor};

/// Additive mask value for disallowed attention or logit entries.
pub const MASK_VALUE: f64 = -1e9;
