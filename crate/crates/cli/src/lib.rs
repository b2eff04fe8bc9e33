//! Command-line workflow for the `aseg` binary: config resolution and the
//! subcommand implementations.

pub mod commands;
pub mod config;
