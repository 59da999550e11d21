//! Referring image segmentation with explicit vision-language alignment.
//!
//! An expression and an image are encoded, fused, and turned into a set of
//! language-conditioned queries. Each query is converted into a dynamic 3×3
//! convolution kernel that produces its own mask; a query estimator weights
//! the masks into the final prediction.

pub mod aligner;
pub mod config;
pub mod data;
pub mod encoders;
mod error;
pub mod fusion;
pub mod harness;
pub mod kv;
pub mod model;
pub mod nn;
pub mod query;
pub mod tensor;

pub use config::{KernelActivation, Mode, ModelConfig};
pub use error::{Error, Result};
pub use model::{Eavl, ForwardOutput, MaskBundle};
