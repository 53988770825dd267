//! File formats, synthetic datasets, training runs and the command line
//! around `avatar-core`.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod runner;

pub use error::{AppError, Result};
