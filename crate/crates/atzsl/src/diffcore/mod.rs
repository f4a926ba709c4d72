//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Small by design: rank-1/rank-2 tensors, the handful of operations a
//! relation network needs, and a tape-style [`Graph`] whose
//! [`backward`](Graph::backward) pass supplies gradients with respect to
//! parameters, inputs, and class prototypes alike. Broadcasting is limited to
//! bias addition; there are no convolutions and no sparse storage.

mod graph;
mod tensor;

pub use graph::{GradientMap, Graph, NodeId};
pub use tensor::Tensor;
