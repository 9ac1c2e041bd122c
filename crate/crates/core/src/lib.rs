pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod safety;

pub use error::{Error, Result};
