//! Command-line front end: dataset generation, matching, external-score
//! refinement, evaluation and the fixture self-test.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod selftest;
pub mod svg;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
