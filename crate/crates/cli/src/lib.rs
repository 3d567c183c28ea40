//! Configuration-driven experiment runner for the `cimsim` simulator.

pub mod config;
pub mod run;

pub use config::RunConfig;
pub use run::{Failure, Overrides, RunOptions};
