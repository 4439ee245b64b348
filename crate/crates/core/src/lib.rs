//! Personalized image generation in two stages: step-blended layout
//! generation with a vanilla/personalized denoiser pair, followed by a
//! retouch pass that swaps attention variables from a layout path and a
//! reference path into the target path and blends self-attention outputs
//! under an adaptive foreground mask.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`, `f64`); runs use
//! the `f32` aliases exported here. A seeded toy denoiser, linear codec,
//! and integer-arithmetic plugin stubs make the whole pipeline executable
//! without external models.

pub mod attention;
pub mod backends;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod maskops;
mod ops;
pub mod pipeline;
pub mod plugins;
pub mod record;
pub mod sampler;
pub mod scalar;
pub mod seeds;
pub mod sweep;
pub mod tensor;

pub use config::{load_config, PipelineConfig, Profile};
pub use error::{Error, Result};
pub use image::{BlendMask, MaskProvenance};
pub use scalar::Scalar;
pub use tensor::{load_tensor, save_tensor, LatentTensor, Tensor};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Latent32 = tensor::LatentTensor<f32>;
pub type Image32 = image::Image<f32>;
pub type Mask32 = image::BlendMask<f32>;
pub type ToyBackend32 = backends::ToyBackend<f32>;
pub type ToyCodec32 = backends::ToyCodec<f32>;
pub type Schedule32 = sampler::NoiseSchedule<f32>;
pub type Trace32 = attention::AttentionTrace<f32>;
pub type RunOutput32 = record::RunOutput<f32>;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Latent64 = tensor::LatentTensor<f64>;
pub type ToyBackend64 = backends::ToyBackend<f64>;
