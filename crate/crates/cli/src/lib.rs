//! Command-line front end: configuration, training loop, evaluation and the
//! check suite behind `tkit selftest`.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod trainer;

pub use error::{CliError, Result};
