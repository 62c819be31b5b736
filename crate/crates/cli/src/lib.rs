//! Command-line pipeline and HTTP review service built on `pvscan-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod errors;
pub mod server;
pub mod workspace;
