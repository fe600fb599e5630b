pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod events;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod spiking;
pub mod ssam;
pub mod stfs;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
