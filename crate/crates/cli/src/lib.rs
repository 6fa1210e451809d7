//! Command-line front end for the ripelab pipeline.
//!
//! Each stage is available as a subcommand; `run` chains them with
//! content-hash caching and writes the report bundle (ripeness-ratio table,
//! risk flags and SVG charts).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{run_pipeline, RunSummary, StageOutcome};
