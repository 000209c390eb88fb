//! Dense tensors and a small reverse-mode autodiff tape.
//!
//! The op set is exactly what the segmentation and latent diffusion
//! networks need: dense, dilated and depthwise convolutions, batch norm,
//! pooling, bilinear upsampling and the fused segmentation losses.

mod error;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use kernels::ConvGeom;
pub use scalar::{gemm, DType, Scalar};
pub use tape::{logistic, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
