pub mod arch;
pub mod bench;
pub mod container;
pub mod data;
pub mod error;
pub mod network;
pub mod pruning;
pub mod layers;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
