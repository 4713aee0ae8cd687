use std::path::PathBuf;

use fmem::FmemError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Ingest { line: u64, message: String },
    #[error("input has no data rows")]
    EmptyInput,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("every gene failed; first failure in {gene_id}: {message}")]
    AllGenesFailed { gene_id: String, message: String },
    #[error(transparent)]
    Model(#[from] FmemError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Ingest { .. } => "ingest",
            CliError::EmptyInput => "empty_input",
            CliError::Csv(_) => "csv",
            CliError::AllGenesFailed { .. } => "all_genes_failed",
            CliError::Model(e) => e.kind(),
        }
    }

    /// One-line JSON object for stderr.
    pub fn summary(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            status: &'a str,
            kind: &'a str,
            message: String,
        }
        serde_json::to_string(&Summary {
            status: "error",
            kind: self.kind(),
            message: self.to_string(),
        })
        .expect("serializable summary")
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
