//! Minimal differentiable dense-array engine.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{scalar_value, Grads, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use scalar::{lit, Precision, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
