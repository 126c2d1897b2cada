pub mod attack;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod grid;
pub mod hessian;
pub mod nn;
pub mod prune;
pub mod scorers;
pub mod tensor;
pub mod train;

pub use error::{DataError, Error, Result};
pub use tensor::Tensor;
