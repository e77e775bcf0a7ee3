//! Configuration, data splits, training runs, sweeps and the command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod run;
pub mod sweep;

pub use config::{InitSpec, Precision, RunConfig, TaskKind};
pub use data::{load_splits, Splits};
