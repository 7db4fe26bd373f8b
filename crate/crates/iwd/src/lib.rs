//! File formats, experiment configs and the command-line front-end for
//! influence-weighted dataset distillation.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod svg;

pub use commands::{run, Command, RunOptions};
pub use error::{CliError, Result};
