pub mod densities;
pub mod linops;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod error;
pub mod experiments;
pub mod io;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
