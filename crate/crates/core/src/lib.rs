//! Quantization-aware training by random partition relaxation.

pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod quantize;
pub mod rng;
pub mod rpr;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
