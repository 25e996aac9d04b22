pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gmm;
pub mod networks;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
