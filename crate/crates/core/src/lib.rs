//! Reference-guided image inpainting on the CPU.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod model;
pub mod nn;
pub mod losses;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod train;
