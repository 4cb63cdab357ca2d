//! Overfitted neural video codec.
//!
//! A desk-scale video codec that stores each frame as quantized hierarchical
//! latent grids plus small entropy-model weight updates, decoded by a
//! patch-wise neural field. Encoding overfits latents and parameters per
//! frame against a rate-distortion objective; the bitstream is bit-exact and
//! decodable by a fresh process holding the same pretrained checkpoint.

pub mod bitstream;
pub mod error;
pub mod frameio;
pub mod entropy;
pub mod hierpe;
pub mod modmixer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod overfit;
pub mod pipeline;
pub mod quant;
pub mod synth;
pub mod range_coder;
pub mod tensor;

pub use error::{CodecError, Result};
