//! Command-line front end: TOML problem configs, the `check`, `solve`,
//! `simulate` and `plot` commands, and their JSON, CSV and SVG outputs.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 infeasible problem,
//! 3 numerical failure.

pub mod commands;
pub mod config;
pub mod document;
pub mod plot;

pub use commands::{run, Cli, Failure};
pub use config::ConfigDocument;
