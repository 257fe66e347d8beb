//! Reversible mixture-of-experts transformer blocks trained without cached activations.

pub mod block;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod moe;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Rng, Tensor};
