//! Batch pipeline around the `fmem` model: CSV ingest, per-gene model fitting
//! with smoothing-parameter selection, pooled permutation tests with FDR
//! control, functional PCA of the mean curves, and plot-ready CSV exports.

pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;
pub mod pipeline;

pub use config::{RunConfig, SimulateConfig};
pub use error::{CliError, Result};
pub use ingest::{ingest_path, ingest_reader, Ingested};
pub use pipeline::{run, RunOutcome, Stages};
