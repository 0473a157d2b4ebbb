//! Deformable multi-modal volume registration with selective state-space
//! sequence blocks, trained on CPU with a small reverse-mode autodiff engine.

pub mod error;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod regnet;
pub mod scalar;
pub mod ssm;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Real};
pub use tensor::{Graph, NodeId, ParamStore, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
