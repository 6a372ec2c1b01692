//! Ghost batch normalization and its noise, isolated.
//!
//! The crate provides batch, ghost-batch, exclusive and layer normalization
//! ([`normalization`]), ghost noise injection and the other noise injectors it
//! is compared against ([`noise`]), and the analytical noise laws plus the
//! statistical tooling used to check them ([`analytics`]).
//!
//! The kernels are generic over [`Scalar`] (`f32` or `f64`). The aliases below
//! fix them to `f64`, which is what the training harness and the tests use.

pub mod analytics;
pub mod error;
pub mod noise;
pub mod normalization;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use noise::{AgniGranularity, DropoutGranularity, GhostNoiseConfig, Injector, NoiseMode, Sampling};
pub use normalization::NormConfig;
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::Shape4;

pub type Tensor = tensor::Tensor4<f64>;
pub type Tensor32 = tensor::Tensor4<f32>;
pub type ChannelStats = tensor::ChannelStats<f64>;
pub type PerSampleChannelStats = tensor::PerSampleChannelStats<f64>;
pub type RunningStats = normalization::RunningStats<f64>;
pub type NoiseDraw = noise::NoiseDraw<f64>;
pub type GhostStats = noise::GhostStats<f64>;
pub type AffineNoise = noise::AffineNoise<f64>;
pub type VarianceDecomposition = analytics::VarianceDecomposition<f64>;
