//! Dense `f64` tensors with reverse-mode differentiation and an Adam
//! optimizer.
//!
//! A forward pass records nodes on a [`Graph`]; [`Graph::backward`] sweeps
//! them in reverse to produce gradients for every differentiable leaf.
//! Broadcasting is limited to [`Graph::add_bias`]; all other binary ops need
//! equal shapes.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{optimizer_step, AdamConfig, OptimizerState};
pub use params::{Bound, GradMap, Param, ParamId, ParamStore};
pub use tensor::Tensor;
