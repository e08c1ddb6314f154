//! Neural machine translation with a multi-channel encoder.
//!
//! The encoder exposes three views of the source sentence: the raw word
//! embeddings, the states of a bidirectional GRU, and an external memory
//! written and read NTM-style while the GRU runs. Learned sigmoid gates blend
//! whichever channels a configuration enables into one annotation matrix,
//! which an attention decoder consumes token by token.
//!
//! All math is explicit scalar code over [`tensor::Tensor`]; forward passes
//! cache what their hand-written backward passes need. Everything is generic
//! over the element type through [`scalar::Scalar`]; use [`f64`] for gradient
//! checks and the tests, `f32` when memory matters more than the last bits.

pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gru;
pub mod inference;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor used by the CLI and the tests.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
