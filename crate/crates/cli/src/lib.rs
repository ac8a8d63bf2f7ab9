//! Library surface of the `stageflow` binary: configuration parsing and
//! subcommand implementations, exposed for integration tests.

pub mod commands;
pub mod config;
