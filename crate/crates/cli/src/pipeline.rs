//! Batch stages: per-gene fitting, pooled permutation tests and fPCA.

use std::collections::BTreeMap;

use fmem::inference::effect_statistic;
use fmem::simulate::{generate, SimulationSpec};
use fmem::{
    assemble, bootstrap_bands, build_null_pool, decompose, discretize, select, test_effect,
    theoretical_bands, BandMethod, ConfidenceBand, Effect, FmemError, FpcaResult, GeneDataset, ModelFit,
    NullInput, SelectionResult, TimeGrid,
};
use rayon::prelude::*;

use crate::config::{RunConfig, SimulateConfig};
use crate::error::{CliError, Result};
use crate::ingest::Ingested;

/// A per-gene (or per-pool, with gene id `*`) failure that did not stop the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub gene_id: String,
    pub stage: String,
    pub error: FmemError,
}

#[derive(Debug, Clone)]
pub struct GeneFit {
    pub data: GeneDataset,
    pub selection: SelectionResult,
    pub fit: ModelFit,
    pub bands: Option<[ConfidenceBand; 3]>,
}

pub fn fit_gene(data: &GeneDataset, cfg: &RunConfig) -> std::result::Result<GeneFit, Failure> {
    let fail = |stage: &str, error: FmemError| Failure {
        gene_id: data.gene_id().to_string(),
        stage: stage.into(),
        error,
    };
    data.check_identifiable().map_err(|e| fail("fit", e))?;
    let selection = select(data, cfg.criterion, &cfg.selection()).map_err(|e| fail("select", e))?;
    let fit = fmem::fit_em(data, selection.best_sp, &cfg.em()).map_err(|e| fail("fit", e))?;
    Ok(GeneFit {
        data: data.clone(),
        selection,
        fit,
        bands: None,
    })
}

fn bands_for(g: &GeneFit, cfg: &RunConfig) -> fmem::Result<[ConfidenceBand; 3]> {
    match cfg.band_method {
        BandMethod::Theoretical => {
            let model = assemble(&g.data, &g.fit.vc, g.fit.sp)?;
            theoretical_bands(&model, cfg.level)
        }
        BandMethod::Bootstrap => bootstrap_bands(&g.fit, &g.data, &cfg.bootstrap()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitStage {
    /// In input order.
    pub fits: Vec<GeneFit>,
    pub failures: Vec<Failure>,
}

pub fn run_fit(genes: &[GeneDataset], cfg: &RunConfig) -> FitStage {
    let results: Vec<_> = genes
        .par_iter()
        .map(|data| {
            let mut g = fit_gene(data, cfg)?;
            let band = bands_for(&g, cfg);
            let mut extra = None;
            match band {
                Ok(b) => g.bands = Some(b),
                Err(error) => {
                    extra = Some(Failure {
                        gene_id: data.gene_id().to_string(),
                        stage: "bands".into(),
                        error,
                    })
                }
            }
            Ok((g, extra))
        })
        .collect();
    let mut stage = FitStage::default();
    for r in results {
        match r {
            Ok((g, extra)) => {
                stage.fits.push(g);
                stage.failures.extend(extra);
            }
            Err(f) => stage.failures.push(f),
        }
    }
    stage
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestRow {
    pub gene_id: String,
    pub effect: Effect,
    pub statistic: f64,
    pub p_value: f64,
    pub q_value: f64,
    pub significant: bool,
    /// The fit's statistic was not finite.
    pub flagged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TestStage {
    /// Grouped by effect, ordered by p-value then gene id within each effect.
    pub rows: Vec<TestRow>,
    pub pool_sizes: BTreeMap<String, usize>,
    pub failures: Vec<Failure>,
}

pub fn run_tests(fits: &[GeneFit], cfg: &RunConfig) -> TestStage {
    let mut stage = TestStage::default();
    if fits.is_empty() {
        return stage;
    }
    let null = cfg.null();
    let inputs: Vec<NullInput> = fits
        .iter()
        .map(|g| NullInput {
            data: &g.data,
            sp: g.fit.sp,
            vc: Some(&g.fit.vc),
        })
        .collect();
    for effect in Effect::ALL {
        let pool = match build_null_pool(&inputs, effect, &null) {
            Ok(p) => p,
            Err(error) => {
                stage.failures.push(Failure {
                    gene_id: "*".into(),
                    stage: format!("test:{effect}"),
                    error,
                });
                continue;
            }
        };
        stage.pool_sizes.insert(effect.to_string(), pool.len());
        if pool.failures > 0 {
            stage.failures.push(Failure {
                gene_id: "*".into(),
                stage: format!("test:{effect}"),
                error: FmemError::PermutationFailures {
                    failed: pool.failures,
                    total: pool.attempted,
                },
            });
        }
        let observed: Vec<(&str, f64)> = fits
            .iter()
            .map(|g| (g.data.gene_id(), effect_statistic(&g.fit, effect)))
            .collect();
        match test_effect(&observed, &pool, cfg.null_scope) {
            Ok(results) => {
                let mut rows: Vec<TestRow> = results
                    .into_iter()
                    .map(|r| TestRow {
                        significant: r.q_value <= cfg.fdr,
                        gene_id: r.gene_id,
                        effect: r.effect,
                        statistic: r.statistic,
                        p_value: r.p_value,
                        q_value: r.q_value,
                        flagged: r.flagged,
                    })
                    .collect();
                rows.sort_by(|a, b| a.p_value.total_cmp(&b.p_value).then_with(|| a.gene_id.cmp(&b.gene_id)));
                stage.rows.extend(rows);
            }
            Err(error) => stage.failures.push(Failure {
                gene_id: "*".into(),
                stage: format!("test:{effect}"),
                error,
            }),
        }
    }
    stage
}

#[derive(Debug, Clone)]
pub struct FpcaStage {
    pub result: FpcaResult,
    pub failures: Vec<Failure>,
}

/// fPCA of the fitted mean curves sharing the most common design grid.
pub fn run_fpca(fits: &[GeneFit], cfg: &RunConfig) -> Result<FpcaStage> {
    let mut counts: Vec<(&TimeGrid, usize)> = Vec::new();
    for g in fits {
        match counts.iter_mut().find(|(grid, _)| **grid == g.fit.grid) {
            Some((_, c)) => *c += 1,
            None => counts.push((&g.fit.grid, 1)),
        }
    }
    let modal = counts
        .iter()
        .fold(None::<(&TimeGrid, usize)>, |best, &(grid, c)| match best {
            Some((_, b)) if b >= c => best,
            _ => Some((grid, c)),
        })
        .map(|(grid, _)| grid.clone());
    let mut failures = Vec::new();
    let mut used = Vec::new();
    for g in fits {
        if Some(&g.fit.grid) == modal.as_ref() {
            used.push(&g.fit);
        } else {
            failures.push(Failure {
                gene_id: g.data.gene_id().to_string(),
                stage: "fpca".into(),
                error: FmemError::InconsistentGrids,
            });
        }
    }
    if used.len() < 2 {
        return Err(CliError::Model(FmemError::InvalidInput(format!(
            "fPCA needs at least 2 fitted genes on a common grid, got {}",
            used.len()
        ))));
    }
    let cm = discretize(&used, cfg.n_grid, cfg.normalization)?;
    let result = decompose(&cm, cfg.retention())?;
    Ok(FpcaStage { result, failures })
}

/// Simulation specs for every gene of a synthetic batch.
pub fn simulation_specs(sim: &SimulateConfig, seed: u64) -> Result<Vec<SimulationSpec>> {
    sim.validate()?;
    let grid = TimeGrid::new(sim.grid.clone())?;
    Ok(sim
        .gene_ids()
        .into_iter()
        .enumerate()
        .map(|(g, id)| {
            SimulationSpec {
                gene_id: id.clone(),
                grid: grid.clone(),
                individuals: sim.individuals.clone(),
                mu: sim.mu.clone(),
                alpha: if g < sim.planted_genes {
                    sim.planted_alpha.clone()
                } else {
                    sim.alpha.clone()
                },
                beta: sim.beta.clone(),
                d_true: sim.d_true.clone(),
                sigma2_true: sim.sigma2,
                seed: 0,
            }
            .for_gene(id, seed)
        })
        .collect())
}

pub fn simulate_batch(sim: &SimulateConfig, seed: u64) -> Result<Ingested> {
    let specs = simulation_specs(sim, seed)?;
    let genes = specs
        .par_iter()
        .map(|s| generate(s).map(|(d, _)| d))
        .collect::<fmem::Result<Vec<_>>>()?;
    Ok(Ingested {
        genes,
        rejected: Vec::new(),
    })
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ingested: usize,
    pub fits: FitStage,
    pub tests: Option<TestStage>,
    pub fpca: Option<std::result::Result<FpcaStage, String>>,
    pub rejected: Vec<Failure>,
}

impl RunOutcome {
    pub fn failures(&self) -> Vec<&Failure> {
        let mut all: Vec<&Failure> = self.rejected.iter().chain(&self.fits.failures).collect();
        if let Some(t) = &self.tests {
            all.extend(&t.failures);
        }
        if let Some(Ok(f)) = &self.fpca {
            all.extend(&f.failures);
        }
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub tests: bool,
    pub fpca: bool,
}

/// Fits every gene and runs the requested downstream stages.
pub fn run(ingested: Ingested, cfg: &RunConfig, stages: Stages) -> Result<RunOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    pool.install(|| {
        let rejected: Vec<Failure> = ingested
            .rejected
            .into_iter()
            .map(|r| Failure {
                gene_id: r.gene_id,
                stage: "ingest".into(),
                error: r.error,
            })
            .collect();
        let n = ingested.genes.len() + rejected.len();
        let fits = run_fit(&ingested.genes, cfg);
        if fits.fits.is_empty() {
            let first = rejected.iter().chain(&fits.failures).next();
            return Err(CliError::AllGenesFailed {
                gene_id: first.map_or_else(String::new, |f| f.gene_id.clone()),
                message: first.map_or_else(|| "no genes".into(), |f| f.error.to_string()),
            });
        }
        let tests = stages.tests.then(|| run_tests(&fits.fits, cfg));
        let fpca = stages
            .fpca
            .then(|| run_fpca(&fits.fits, cfg).map_err(|e| e.to_string()));
        Ok(RunOutcome {
            ingested: n,
            fits,
            tests,
            fpca,
            rejected,
        })
    })
}
