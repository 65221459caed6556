//! Minimal reverse-mode automatic differentiation: enough to run and
//! attack small convolutional pose networks, nothing more.

mod graph;
mod ops;
mod sgd;
mod tensor;

pub mod gradcheck;
pub mod layers;

pub use graph::{Graph, NodeId};
pub use layers::{init_layer_params, run_layers, LayerSpec};
pub use sgd::Sgd;
pub use tensor::Tensor;
