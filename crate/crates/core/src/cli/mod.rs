//! Command-line front end: `gen-data`, `train`, `sample` and `eval`, driven
//! by a flat `key = value` run configuration.

mod commands;
mod config;

pub use commands::{exit_code, run, Cli, Command, Precision};
pub use config::{EvalSection, PathsSection, RunConfig, TeacherSection, TeacherSource};
