pub mod config;
pub mod diffcore;
pub mod embedding;
pub mod error;
pub mod flow;
pub mod io;
pub mod rng;
pub mod signal;
pub mod validation;

pub use error::{Error, Result};
