//! CPU tensors with reverse-mode automatic differentiation.
//!
//! Every type is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; gradient checks and numerical oracles run the same code in `f64`.

pub mod graph;
pub mod kernels;
pub mod params;
pub mod scalar;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Unary, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
