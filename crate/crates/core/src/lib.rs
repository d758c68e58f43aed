pub mod attention;
pub mod bench;
pub mod config;
mod error;
pub mod model;
pub mod plan;
pub mod train;

pub use error::{Error, Result};
