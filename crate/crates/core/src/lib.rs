//! Discrete image tokenizer over a fixed vocabulary embedding table, with a
//! masked autoregressive rectified-flow decoder and a small autoregressive
//! prior over token sequences.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod resampler;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use config::{Config, SamplerMethod};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use image::Image;
pub use tensor::{Element, Tensor};
pub use tokenizer::{Tokenizer, Trainer};
