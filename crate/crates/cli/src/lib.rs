//! Library surface of the command-line runner: configuration, artifact
//! formats, and the subcommand implementations. The binary in `main.rs`
//! is a thin argument-parsing wrapper, so integration tests drive the
//! exact same code paths.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod data_io;
