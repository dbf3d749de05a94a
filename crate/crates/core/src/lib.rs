pub mod ablation;
pub mod aggregate;
pub mod cache;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
