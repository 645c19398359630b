//! Minimal CPU neural-network engine: tensors, reverse-mode autodiff, layers, Adam.

mod graph;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{group_count, Conv2d, GroupNorm, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
