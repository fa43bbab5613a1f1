pub mod checkpoint;
pub mod cli;
pub mod conditioner;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod lora;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rewards;
pub mod seed;
pub mod toy_world;
pub mod trainer;

pub use error::{Error, Result};
