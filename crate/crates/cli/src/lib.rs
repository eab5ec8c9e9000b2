//! Command-line front end: scenario configs, file formats and the
//! `simulate`, `fit`, `map`, `classify` and `pipeline` commands.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod files;

pub use config::ScenarioConfig;
pub use error::CliError;
