//! Streaming audio-to-video latent diffusion at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f32 tensors with reverse-mode autodiff, Adam, and the
//!   `RESTTNSR` dump format.
//! - [`codec`]: toy video and speech latent codecs plus the feature extractor.
//! - [`corpus`]: deterministic synthetic audio/video clips.
//! - [`chunk`] and [`flow`]: chunk segmentation, asynchronous timestep
//!   vectors, and the flow-matching path with its Euler integrator.
//! - [`model`]: the audio-to-video diffusion transformer with ID-sink /
//!   context KV caching, and the `RESTCKPT` checkpoint format.
//! - [`train`]: asynchronous teacher training and streaming student
//!   distillation (contrastive + smoothness constraints).
//! - [`infer`]: the dual-loop autoregressive sampler with joint
//!   classifier-free guidance, evaluation metrics, and scaling benchmarks.
//! - [`verify`]: the oracle suite behind `rest verify`.

pub mod chunk;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub mod cli;

pub use error::{RestError, Result};
pub use tensor::Tensor;
