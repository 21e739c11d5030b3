//! Minimal differentiable tensor engine: dense layers, multi-head
//! attention building blocks, layer norm, softmax/cross-entropy, and an
//! adaptive-moment optimizer. f64 math during training, f32 at rest.

pub mod adam;
pub mod graph;
pub mod tensor;

pub use adam::{Adam, Gradients, Parameters};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
