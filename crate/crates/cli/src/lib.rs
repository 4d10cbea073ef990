//! Experiment recipes and sweep orchestration on top of `eos-core`, writing
//! CSV tables, SVG charts and a run manifest per invocation.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod fetch;
pub mod manifest;
pub mod recipes;
pub mod svg;

pub use config::{ExperimentConfig, Recipe};
pub use error::{LabError, Result};
pub use recipes::{run, RunOptions};
