//! Minimal reverse-mode automatic differentiation over NCHW tensors.

mod graph;
mod ops;
mod real;

pub mod check;

pub use graph::{GradSink, Gradients, Graph, Tensor, Var};
pub use ops::Conv2d;
pub use real::{gemm, MatRef, Real};
