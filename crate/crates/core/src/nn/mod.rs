//! Minimal tensor library: dense arrays, reverse-mode autodiff over the
//! layers a UNet needs, Adam, and a checkpoint container.

pub mod checkpoint;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use graph::{focal_loss_value, BatchStats, Gradients, Graph, Var, FOCAL_EPS};
pub use params::{AdamConfig, Buffer, BufferId, Param, ParamId, ParamStore};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
