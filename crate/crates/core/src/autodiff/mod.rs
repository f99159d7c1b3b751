//! Dense tensors with reverse-mode automatic differentiation.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{BatchStats, ConvGeom, Gradients, Graph, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use gemm::gemm;
#[cfg(test)]
pub(crate) use graph::column_means;

#[cfg(test)]
mod tests;
