pub mod backbone;
pub mod data;
pub mod gradsuite;
pub mod error;
pub mod mae;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Element, Tensor};
