//! Federated answer selection with a shared transformer backbone and
//! private per-client patches.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::ParameterSet;
pub use tensor::Tensor;
