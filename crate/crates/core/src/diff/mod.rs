//! Minimal differentiable numeric core: tensors, a recording tape with
//! reverse-mode gradients, parameter storage, an optimizer and a
//! finite-difference checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, BlockReport, GradCheckOptions, GradCheckReport};
pub use graph::{conv_out_size, Gradients, Graph, Var};
pub(crate) use graph::{sigmoid, softmax_in_place};
pub use optim::{Adam, AdamConfig, StepReport};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
