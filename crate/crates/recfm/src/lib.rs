//! File formats, experiment drivers and the `recfm` command-line tool built
//! on `recfm-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod plot;
pub mod rundir;

pub use error::{CliError, CliResult};
