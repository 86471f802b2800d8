//! Experiment harness: configuration, end-to-end pipelines, benchmark
//! evaluation, the five standard experiments, and result emission.
//!
//! The library side exists so integration tests can drive pipelines
//! in-process; the `corruptlab` binary is a thin command-line shell over
//! the same functions.
//!
//! Everything here is deterministic in the configuration: a config with
//! fixed seeds reproduces every artifact file byte for byte. Artifacts
//! never embed timestamps or absolute paths.

pub mod cli;
pub mod config;
pub mod eval;
pub mod experiments;
pub mod pipeline;
pub mod report;

#[cfg(doctest)]
mod book;

pub use config::{Experiment, ExperimentConfig};
pub use eval::{evaluate, EvalReport};
pub use pipeline::{HarnessError, RunDirs};
