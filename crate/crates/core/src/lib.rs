pub mod balancers;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
