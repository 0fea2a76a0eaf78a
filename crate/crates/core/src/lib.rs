pub mod ablate;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod glsa;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sba;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
