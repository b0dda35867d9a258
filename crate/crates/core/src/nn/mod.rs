//! Minimal convolutional network toolkit: parameters, a differentiable graph and optimizers.

mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{Conv2d, Graph, NodeId};
pub use kernels::ConvGeom;
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use params::{Grads, Initializer, ParamId, ParamStore, TensorInfo};
