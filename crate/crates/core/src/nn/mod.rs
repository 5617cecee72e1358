//! Minimal differentiable-tensor engine used by every model in the crate.

pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{softmax_rows, Gradients, Graph, Padding, Var};
pub use params::{Adam, Param, ParamSet};
pub use tensor::Tensor;
