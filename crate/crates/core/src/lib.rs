pub mod agent;
pub mod env;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod replay;
pub mod safety;

pub use error::{Error, Result};
