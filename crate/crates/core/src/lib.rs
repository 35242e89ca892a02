pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod datasets;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod generator;
pub mod nn;
pub mod objectives;
pub mod registry;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
