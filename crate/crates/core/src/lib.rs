pub mod config;
pub mod dataset;
pub mod deterministic;
pub mod embedding;
mod error;
pub mod evalkit;
pub mod model;
pub mod probabilistic;
pub mod trainer;

pub use error::{Error, Result};
