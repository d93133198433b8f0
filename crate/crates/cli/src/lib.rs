//! Command line and HTTP front end for whiteguard guard bundles.

pub mod commands;
pub mod config;
pub mod demo;
pub mod error;
pub mod service;

pub use error::{CliError, CliResult};
