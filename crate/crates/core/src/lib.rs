//! Motion-primitive transformer for inertial activity recognition.
//!
//! Multi-channel sensor windows are cut into fixed-length single-channel
//! segments, instance-normalized and vector-quantized into a learned codebook
//! of motion primitives. The primitive indices, raw segment statistics and
//! sensor metadata are embedded into one token sequence per window, encoded
//! by a small transformer, and trained with masked primitive prediction and
//! activity classification.
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the common choice.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod ingest;
pub mod metadata;
pub mod model;
pub mod quantizer;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Codebook = quantizer::Codebook<f64>;
pub type Codebook32 = quantizer::Codebook<f32>;
pub type SensorWindow = ingest::SensorWindow<f64>;
pub type Model = model::MoPFormer<f64>;
pub type Model32 = model::MoPFormer<f32>;
pub type Encoder = encoder::Encoder<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
