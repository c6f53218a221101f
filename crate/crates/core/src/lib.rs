pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod model;
pub mod params;
pub mod patch;
pub mod pool;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Mode, Tape, Tensor, Var};
