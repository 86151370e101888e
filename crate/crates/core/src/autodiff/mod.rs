//! Minimal reverse-mode automatic differentiation over dense `[C, H, W]`
//! feature maps and 2-D matrices, generic over `f32` / `f64`.

mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
