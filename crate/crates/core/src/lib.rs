pub mod augment;
pub mod components;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod review;
pub mod sampler;
pub mod slide_io;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
