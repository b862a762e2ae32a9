//! Small dense tensors with tape-based reverse-mode autodiff, sized for
//! CPU training of compact convolutional networks.

mod element;
pub mod graph;
pub mod kernels;
pub mod optim;
mod tensor;

pub use element::{matmul, Element};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use kernels::{Conv2dSpec, Pad4};
pub use tensor::Tensor;
