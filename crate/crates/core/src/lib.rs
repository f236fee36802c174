//! Transducer training with sampled softmax.

pub mod ctc;
pub mod dataio;
pub mod decode;
pub mod error;
pub mod memory_model;
pub mod model;
pub mod numerics;
pub mod rnnt_loss;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
