//! Document field segmentation: a shifted-MLP UNet whose bottleneck attends
//! to a text embedding, with the tensor/autodiff substrate, synthetic data,
//! training loop, metrics and cost accounting it needs.

pub mod blocks;
pub mod data;
pub mod embed;
pub mod model;
mod error;
pub mod nn;
pub mod profile;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Tensor, Var};
