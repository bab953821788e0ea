//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! Derivative rules are expressed with the same primitives they differentiate,
//! so [`Graph::grad`] with `create_graph = true` yields gradients that can be
//! differentiated again.

mod fd;
mod graph;
mod ops;
mod tensor;

pub use fd::{fd_check, fd_compare, fd_gradient, scalar_fn, scaled_error};
pub use graph::{GradMap, Graph, NodeId, Var};
pub use ops::STD_EPS;
pub use tensor::Tensor;
