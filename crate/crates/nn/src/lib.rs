//! Minimal reverse-mode autodiff for small 2D/3D convolutional networks on
//! the CPU. Everything runs single-threaded in a fixed order, so results are
//! bit-reproducible for a given seed.

mod float;
mod graph;
pub mod kernels;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use float::{gemm, Float};
pub use graph::{Graph, Var, NORM_EPS};
pub use optim::Adam;
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
