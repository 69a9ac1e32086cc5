pub mod error;
pub mod eval;
pub mod featgrid;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod neural;
pub mod select;

pub use error::{Error, Result};
