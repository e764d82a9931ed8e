//! Files, checkpoints and the command line around `rolelora-core`.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
