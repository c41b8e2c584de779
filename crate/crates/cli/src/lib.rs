//! Command-line driver for the `qadp` library: hydrologic model estimation,
//! policy training, simulation and comparison, all reproducible from files.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_compare, cmd_estimate, cmd_simulate, cmd_synth, cmd_train, PolicyKind, SimMode};
pub use config::{Overrides, RunConfig};
pub use error::CliError;
