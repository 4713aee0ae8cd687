use std::path::{Path, PathBuf};

use fmem::simulate::{case_study_grid, case_study_individuals};
use fmem::{
    BandMethod, BootstrapOptions, Criterion, EmOptions, NullConfig, NullScope, Normalization, Retention,
    SelectionOptions, SimIndividual, SpPolicy, TemporalScheme,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub criterion: Criterion,
    pub permutations: usize,
    pub fdr: f64,
    pub level: f64,
    pub band_method: BandMethod,
    pub bootstrap_replicates: usize,
    pub n_grid: usize,
    pub normalization: Normalization,
    pub variance_target: f64,
    pub max_components: usize,
    pub budget: usize,
    pub warm_start: bool,
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub seed: u64,
    pub workers: usize,
    /// Ages at or below the cutoff are young.
    pub age_cutoff: f64,
    pub temporal_scheme: TemporalScheme,
    pub null_scope: NullScope,
    /// Re-select smoothing parameters on every permuted dataset.
    pub reselect_null: bool,
    pub max_failure_fraction: f64,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: PathBuf::from("fmem-out"),
            criterion: Criterion::Bic,
            permutations: 32,
            fdr: 0.10,
            level: 0.95,
            band_method: BandMethod::Theoretical,
            bootstrap_replicates: 200,
            n_grid: fmem::fpca::DEFAULT_GRID_POINTS,
            normalization: Normalization::SubtractFirst,
            variance_target: 0.999,
            max_components: 10,
            budget: 100,
            warm_start: true,
            em_tol: 1e-6,
            em_max_iter: 200,
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            age_cutoff: 55.0,
            temporal_scheme: TemporalScheme::Global,
            null_scope: NullScope::Pooled,
            reselect_null: false,
            max_failure_fraction: 0.10,
            simulate: SimulateConfig::default(),
        }
    }
}

fn open_unit(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must lie in (0, 1), got {x}")))
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        open_unit("fdr", self.fdr)?;
        open_unit("level", self.level)?;
        if !(self.variance_target > 0.0 && self.variance_target <= 1.0) {
            return Err(CliError::Config(format!(
                "variance_target must lie in (0, 1], got {}",
                self.variance_target
            )));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(CliError::Config("max_failure_fraction must lie in [0, 1]".into()));
        }
        let positive = [
            ("permutations", self.permutations),
            ("n_grid", self.n_grid.saturating_sub(1)),
            ("max_components", self.max_components),
            ("em_max_iter", self.em_max_iter),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("{name} is too small")));
            }
        }
        if !(self.em_tol > 0.0) {
            return Err(CliError::Config(format!("em_tol must be positive, got {}", self.em_tol)));
        }
        if self.band_method == BandMethod::Bootstrap && self.bootstrap_replicates < 100 {
            return Err(CliError::Config("bootstrap_replicates must be at least 100".into()));
        }
        if !self.age_cutoff.is_finite() {
            return Err(CliError::Config("age_cutoff must be finite".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config("seed must be below 2^63".into()));
        }
        self.simulate.validate()
    }

    pub fn em(&self) -> EmOptions {
        EmOptions {
            tol: self.em_tol,
            max_iter: self.em_max_iter,
            init: None,
        }
    }

    pub fn selection(&self) -> SelectionOptions {
        SelectionOptions {
            budget: self.budget,
            em: self.em(),
            warm_start: self.warm_start,
            ..SelectionOptions::default()
        }
    }

    pub fn null(&self) -> NullConfig {
        NullConfig {
            permutations_per_gene: self.permutations,
            seed: self.seed,
            sp_policy: if self.reselect_null {
                SpPolicy::Reselect {
                    criterion: self.criterion,
                    options: self.selection(),
                }
            } else {
                SpPolicy::ReuseObserved
            },
            temporal_scheme: self.temporal_scheme,
            em: self.em(),
            max_failure_fraction: self.max_failure_fraction,
        }
    }

    pub fn bootstrap(&self) -> BootstrapOptions {
        BootstrapOptions {
            replicates: self.bootstrap_replicates,
            level: self.level,
            seed: self.seed,
            em: self.em(),
            ..BootstrapOptions::default()
        }
    }

    pub fn retention(&self) -> Retention {
        Retention::VarianceTarget {
            target: self.variance_target,
            max: self.max_components,
        }
    }
}

/// Synthetic batch description; every gene shares the template and gets a
/// seed derived from the run seed and its id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub genes: usize,
    pub gene_prefix: String,
    pub grid: Vec<f64>,
    pub individuals: Vec<SimIndividual>,
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub d_true: Vec<Vec<f64>>,
    pub sigma2: f64,
    /// The first `planted_genes` genes use `planted_alpha` instead of `alpha`.
    pub planted_genes: usize,
    pub planted_alpha: Vec<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let grid = case_study_grid().points().to_vec();
        let scaled: Vec<f64> = grid.iter().map(|t| (t - 90.0) / 90.0).collect();
        let sigma = 0.2;
        Self {
            genes: 100,
            gene_prefix: "gene".into(),
            mu: grid.iter().map(|t| 7.0 + 0.6 * (-t / 30.0).exp()).collect(),
            alpha: vec![0.0; grid.len()],
            beta: vec![0.0; grid.len()],
            d_true: (0..grid.len())
                .map(|r| {
                    (0..grid.len())
                        .map(|c| {
                            let stationary = (-(grid[r] - grid[c]).abs() / 30.0).exp();
                            0.25 + 0.1 * scaled[r] * scaled[c] + 0.05 * stationary
                        })
                        .collect()
                })
                .collect(),
            sigma2: sigma * sigma,
            planted_genes: 0,
            planted_alpha: vec![5.0 * sigma; grid.len()],
            individuals: case_study_individuals(),
            grid,
        }
    }
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.grid.len();
        for (name, v) in [("mu", &self.mu), ("alpha", &self.alpha), ("beta", &self.beta)] {
            if v.len() != m {
                return Err(CliError::Config(format!("simulate.{name} has {} values for {m} days", v.len())));
            }
        }
        if self.planted_genes > 0 && self.planted_alpha.len() != m {
            return Err(CliError::Config(format!(
                "simulate.planted_alpha has {} values for {m} days",
                self.planted_alpha.len()
            )));
        }
        if self.planted_genes > self.genes {
            return Err(CliError::Config("simulate.planted_genes exceeds simulate.genes".into()));
        }
        Ok(())
    }

    /// Zero-padded gene ids so lexical and numeric order agree.
    pub fn gene_ids(&self) -> Vec<String> {
        let width = self.genes.saturating_sub(1).to_string().len();
        (0..self.genes)
            .map(|g| format!("{}{:0width$}", self.gene_prefix, g))
            .collect()
    }
}
