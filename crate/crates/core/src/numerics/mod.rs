//! Dense tensors, reverse-mode autodiff and first-order optimizers.

mod graph;
mod optim;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use optim::{cosine_lr, Adam, Optimizer, OptimizerKind};
pub use tensor::Tensor;
