pub mod error;
pub mod losses;
pub mod attention;
pub mod backbone;
pub mod cli;
pub mod numerics;
pub mod retrieval;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
