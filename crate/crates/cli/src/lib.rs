//! Command-line orchestration of the connectome pipeline: configuration
//! layering, the on-disk graph store, pipeline stages and report tables.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod store;

pub use commands::{run, Cli};
pub use config::{ConfigLayer, RunConfig};
pub use pipeline::{run_pipeline, PipelineOutput};
