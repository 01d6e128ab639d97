pub mod captioner;
pub mod cli;
pub mod error;
pub mod features;
pub mod io;
pub mod lstm;
pub mod metrics;
pub mod text;

pub use error::{Error, Result};
