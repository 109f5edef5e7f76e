pub mod centers;
pub mod dataset;
pub mod error;
pub mod hash_head;
pub mod model;
pub mod objective;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
