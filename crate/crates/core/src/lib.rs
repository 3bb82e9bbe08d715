pub mod attention;
pub mod autograd;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
