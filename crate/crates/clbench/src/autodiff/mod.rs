//! Minimal reverse-mode autodiff: dense tensors, a per-step operation tape,
//! the loss functions used by the training strategies, and SGD.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{Param, ParamId, ParamSet};
pub use tensor::Tensor;
