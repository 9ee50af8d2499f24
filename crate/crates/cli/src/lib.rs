//! Command implementations and run configuration behind the `ssae` binary.

pub mod commands;
pub mod config;

pub use config::{EvalConfig, RunConfig};
