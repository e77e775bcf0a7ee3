pub mod cam;
pub mod datagen;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod layers;
pub mod matcher;
pub mod metrics;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
