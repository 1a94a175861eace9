//! Command-line front end: configuration, image and dataset loading,
//! synthetic data, checkpoints and the subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod pgm;
pub mod synth;

pub use commands::{run, Cli};
