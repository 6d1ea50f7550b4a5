pub mod analysis;
pub mod data;
pub mod engine;
pub mod error;
pub mod quant;
pub mod tensor;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
