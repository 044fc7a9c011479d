pub mod diffusion;
pub mod error;
pub mod image;
pub mod lora;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
