//! Supervised contrastive pre-training for product matching, with hard
//! negatives drawn from blocking groups.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod experiment;
pub mod loss;
pub mod matching;
pub mod numerics;
pub mod sampler;
pub mod scalar;
pub mod train;

pub use scalar::{DType, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Model32 = encoder::ContrastiveModel<f32>;
pub type Model64 = encoder::ContrastiveModel<f64>;
pub type Backbone32 = encoder::Backbone<f32>;
