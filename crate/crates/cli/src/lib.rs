//! File formats, configuration and commands for the `bmd` binary.

pub mod bank;
pub mod commands;
pub mod config;
