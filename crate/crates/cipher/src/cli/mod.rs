//! The `cipher` command-line tool: run configuration and the per-command
//! pipeline implementations.

pub mod config;
pub mod pipeline;

pub use config::{Config, Precision};
pub use pipeline::{run_command, runs_root, RunContext, RunLock};
