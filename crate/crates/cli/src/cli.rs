use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fmem::{BandMethod, Criterion, NullScope, Normalization, TemporalScheme};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output;
use crate::pipeline::{self, Stages};

#[derive(Debug, Parser)]
#[command(name = "fmem", version, about = "Functional mixed-effects analysis of replicated time-course data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Select smoothing parameters and fit every gene.
    Fit,
    /// Fit, then run the gender, age and temporal permutation tests.
    Test,
    /// Fit, then run functional PCA of the fitted mean curves.
    Fpca,
    /// Write a synthetic data set in the input format.
    Simulate,
    /// Fit, test and run fPCA.
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Test => "test",
            Command::Fpca => "fpca",
            Command::Simulate => "simulate",
            Command::All => "all",
        }
    }
}

/// Flags that override the configuration file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub criterion: Option<Criterion>,
    #[arg(long, global = true)]
    pub permutations: Option<usize>,
    #[arg(long, global = true)]
    pub fdr: Option<f64>,
    #[arg(long, global = true)]
    pub level: Option<f64>,
    #[arg(long, global = true)]
    pub band_method: Option<BandMethod>,
    #[arg(long, global = true)]
    pub bootstrap_replicates: Option<usize>,
    #[arg(long, global = true)]
    pub n_grid: Option<usize>,
    /// `none` or `subtract_first`.
    #[arg(long, global = true, value_parser = parse_normalization)]
    pub normalization: Option<Normalization>,
    #[arg(long, global = true)]
    pub variance_target: Option<f64>,
    #[arg(long, global = true)]
    pub max_components: Option<usize>,
    /// Simplex iterations for smoothing-parameter selection.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    #[arg(long, global = true)]
    pub warm_start: Option<bool>,
    #[arg(long, global = true)]
    pub em_tol: Option<f64>,
    #[arg(long, global = true)]
    pub em_max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short, long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub age_cutoff: Option<f64>,
    /// `global` or `per_individual`.
    #[arg(long, global = true, value_parser = parse_scheme)]
    pub temporal_scheme: Option<TemporalScheme>,
    /// `pooled` or `per_gene`.
    #[arg(long, global = true, value_parser = parse_scope)]
    pub null_scope: Option<NullScope>,
    #[arg(long, global = true)]
    pub reselect_null: Option<bool>,
    /// Number of synthetic genes (simulate).
    #[arg(long, global = true)]
    pub genes: Option<usize>,
    /// Synthetic genes given a gender effect (simulate).
    #[arg(long, global = true)]
    pub planted_genes: Option<usize>,
}

fn parse_normalization(s: &str) -> std::result::Result<Normalization, String> {
    match s {
        "none" => Ok(Normalization::None),
        "subtract_first" => Ok(Normalization::SubtractFirst),
        other => Err(format!("unknown normalization {other:?}")),
    }
}

fn parse_scheme(s: &str) -> std::result::Result<TemporalScheme, String> {
    match s {
        "global" => Ok(TemporalScheme::Global),
        "per_individual" => Ok(TemporalScheme::PerIndividual),
        other => Err(format!("unknown temporal scheme {other:?}")),
    }
}

fn parse_scope(s: &str) -> std::result::Result<NullScope, String> {
    match s {
        "pooled" => Ok(NullScope::Pooled),
        "per_gene" => Ok(NullScope::PerGene),
        other => Err(format!("unknown null scope {other:?}")),
    }
}

macro_rules! apply {
    ($cfg:expr, $o:expr, $($field:ident),*) => {
        $(if let Some(v) = $o.$field.clone() { $cfg.$field = v; })*
    };
}

impl Overrides {
    /// Configuration file (or defaults) with flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if self.input.is_some() {
            cfg.input = self.input.clone();
        }
        apply!(
            cfg, self, output, criterion, permutations, fdr, level, band_method, bootstrap_replicates, n_grid,
            normalization, variance_target, max_components, budget, warm_start, em_tol, em_max_iter, seed,
            workers, age_cutoff, temporal_scheme, null_scope, reselect_null
        );
        if let Some(g) = self.genes {
            cfg.simulate.genes = g;
        }
        if let Some(p) = self.planted_genes {
            cfg.simulate.planted_genes = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one subcommand and returns a short human-readable report.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<String> {
    if command == Command::Simulate {
        let specs = pipeline::simulation_specs(&cfg.simulate, cfg.seed)?;
        let batch = pipeline::simulate_batch(&cfg.simulate, cfg.seed)?;
        let files = output::write_simulation(&cfg.output, cfg, &specs, &batch.genes)?;
        return Ok(format!(
            "simulated {} genes into {} ({})",
            batch.genes.len(),
            cfg.output.display(),
            files.join(", ")
        ));
    }
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Config("no input file given".into()))?;
    let ingested = crate::ingest::ingest_path(input, cfg.age_cutoff)?;
    let stages = Stages {
        tests: matches!(command, Command::Test | Command::All),
        fpca: matches!(command, Command::Fpca | Command::All),
    };
    let outcome = pipeline::run(ingested, cfg, stages)?;
    let files = output::write_outcome(&cfg.output, command.name(), cfg, &outcome)?;
    if let Some(Err(message)) = &outcome.fpca {
        return Err(CliError::Model(fmem::FmemError::InvalidInput(message.clone())));
    }
    let mut report = format!(
        "fitted {} of {} genes, {} failures recorded; wrote {} to {}",
        outcome.fits.fits.len(),
        outcome.ingested,
        outcome.failures().len(),
        files.join(", "),
        cfg.output.display()
    );
    if let Some(tests) = &outcome.tests {
        for effect in fmem::Effect::ALL {
            let hits = tests.rows.iter().filter(|r| r.effect == effect && r.significant).count();
            report.push_str(&format!("\n{effect}: {hits} significant at FDR {}", cfg.fdr));
        }
    }
    Ok(report)
}
