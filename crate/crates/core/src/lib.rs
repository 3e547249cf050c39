pub mod data;
pub mod error;
pub mod experiment;
pub mod gap;
pub mod model;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
