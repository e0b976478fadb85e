//! Conditional diffusion super-resolution with a neural-operator prior.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod neural_operator;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use grid::ImageGrid;
