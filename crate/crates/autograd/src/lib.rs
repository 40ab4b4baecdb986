//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] sweeps the
//! tape once in reverse. The operation set is exactly what a small
//! convolution + attention few-shot network needs: convolutions, pooling,
//! normalization, batched matrix products, softmax and a handful of
//! elementwise and reshaping primitives.

pub mod check;
mod gemm;
mod graph;
mod ops;
pub mod parallel;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::conv::BATCH_NORM_EPS;
pub use ops::elementwise::NLL_CLAMP;
pub use ops::linalg::{softmax_in_place, LAYER_NORM_EPS};
pub use parallel::Execution;
pub use tensor::Tensor;
