pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod ep;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod signal;
pub mod snn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ParseError, Result};
pub use tensor::{Scalar, Tensor};
