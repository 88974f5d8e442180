pub mod analysis;
pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
