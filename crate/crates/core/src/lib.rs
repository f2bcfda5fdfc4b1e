//! Hierarchical human parsing with direct, top-down and bottom-up inference
//! fused per node by learned confidence gates.
//!
//! The network is generic over [`Scalar`]: use the `*64` aliases for
//! deterministic runs and gradient checks, the `*32` aliases for speed.

pub mod autograd;
pub mod data;
pub mod direct;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hierarchy;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod structured;
pub mod tensor;

pub use error::{Error, Result};
pub use hierarchy::Hierarchy;
pub use model::{ForwardOptions, Model, ModelConfig, Variant};
pub use optim::{Checkpoint, TrainConfig, Trainer};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
