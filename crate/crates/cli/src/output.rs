//! CSV tables and the run manifest. Floats use 17 significant digits so
//! tables round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use fmem::simulate::SimulationSpec;
use fmem::{Criterion, FpcaResult, GeneDataset};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{Failure, FitStage, FpcaStage, RunOutcome, TestStage};

pub const FITS: &str = "fits.csv";
pub const CURVES: &str = "curves.csv";
pub const COVARIANCE: &str = "random_covariance.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const TESTS: &str = "tests.csv";
pub const FPCA_COMPONENTS: &str = "fpca_components.csv";
pub const FPCA_EIGENVALUES: &str = "fpca_eigenvalues.csv";
pub const FPCA_LOADINGS: &str = "fpca_loadings.csv";
pub const FAILURES: &str = "failures.csv";
pub const MANIFEST: &str = "run_manifest.toml";
pub const SIMULATED: &str = "simulated.csv";
pub const SIMULATED_TRUTH: &str = "simulated_truth.csv";

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(Self { path, writer })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        Ok(self.writer.write_record(fields)?)
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn write_fits(dir: &Path, stage: &FitStage, criterion: Criterion) -> Result<()> {
    let mut t = Table::create(
        dir,
        FITS,
        &[
            "gene_id",
            "n_individuals",
            "n_obs",
            "criterion",
            "criterion_value",
            "lambda",
            "lambda_gamma",
            "loglik",
            "sigma2",
            "trace_d",
            "df_fixed",
            "df_random",
            "em_iterations",
            "converged",
            "ridged",
            "sigma2_floored",
            "selection_evaluations",
        ],
    )?;
    for g in &stage.fits {
        let f = &g.fit;
        t.row([
            f.gene_id.clone(),
            f.n_individuals().to_string(),
            f.n_obs().to_string(),
            criterion.to_string(),
            num(g.selection.criterion_value),
            num(f.sp.lambda),
            num(f.sp.lambda_gamma),
            num(f.loglik),
            num(f.vc.sigma2),
            num(f.vc.d.trace()),
            num(f.df_fixed),
            num(f.df_random),
            f.em_iterations.to_string(),
            f.converged.to_string(),
            f.ridged.to_string(),
            f.sigma2_floored.to_string(),
            g.selection.trace.len().to_string(),
        ])?;
    }
    t.finish()?;

    let mut curves = Table::create(
        dir,
        CURVES,
        &[
            "gene_id",
            "day",
            "mu",
            "alpha",
            "beta",
            "band_method",
            "level",
            "mu_lower",
            "mu_upper",
            "alpha_lower",
            "alpha_upper",
            "beta_lower",
            "beta_upper",
        ],
    )?;
    let mut cov = Table::create(dir, COVARIANCE, &["gene_id", "day_row", "day_col", "d"])?;
    for g in &stage.fits {
        let f = &g.fit;
        let pts = f.grid.points();
        for (k, &day) in pts.iter().enumerate() {
            let mut row = vec![f.gene_id.clone(), num(day), num(f.mu[k]), num(f.alpha[k]), num(f.beta[k])];
            match &g.bands {
                Some(bands) => {
                    row.push(bands[0].method.to_string());
                    row.push(num(bands[0].level));
                    for b in bands {
                        row.push(num(b.lower[k]));
                        row.push(num(b.upper[k]));
                    }
                }
                None => row.extend(std::iter::repeat(String::new()).take(8)),
            }
            curves.row(row)?;
            for (c, &other) in pts.iter().enumerate() {
                cov.row([f.gene_id.clone(), num(day), num(other), num(f.vc.d[(k, c)])])?;
            }
        }
    }
    curves.finish()?;
    cov.finish()
}

/// Standardized residuals with keys for residual-vs-fitted, residual-vs-time,
/// residual-vs-observation and normal QQ panels.
fn write_diagnostics(dir: &Path, stage: &FitStage) -> Result<()> {
    let mut t = Table::create(
        dir,
        DIAGNOSTICS,
        &[
            "gene_id",
            "observation",
            "subject_id",
            "day",
            "fitted",
            "residual",
            "standardized_residual",
            "normal_quantile",
        ],
    )?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    for g in &stage.fits {
        let f = &g.fit;
        let std = f.standardized_residuals();
        let n = std.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| std[a].total_cmp(&std[b]).then(a.cmp(&b)));
        let mut quantile = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            quantile[i] = normal.inverse_cdf((rank as f64 + 0.5) / n as f64);
        }
        let mut k = 0;
        for ind in g.data.individuals() {
            for &day in &ind.obs_times {
                t.row([
                    f.gene_id.clone(),
                    k.to_string(),
                    ind.subject_id.clone(),
                    num(day),
                    num(f.fitted[k]),
                    num(f.residuals[k]),
                    num(std[k]),
                    num(quantile[k]),
                ])?;
                k += 1;
            }
        }
    }
    t.finish()
}

fn write_tests(dir: &Path, stage: &TestStage) -> Result<()> {
    let mut t = Table::create(
        dir,
        TESTS,
        &["gene_id", "effect", "l2_norm", "p_value", "q_value", "significant", "flagged"],
    )?;
    for r in &stage.rows {
        t.row([
            r.gene_id.clone(),
            r.effect.to_string(),
            num(r.statistic),
            num(r.p_value),
            num(r.q_value),
            r.significant.to_string(),
            r.flagged.to_string(),
        ])?;
    }
    t.finish()
}

fn pc_header(first: &str, k: usize) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain((1..=k).map(|c| format!("pc{c}")))
        .collect()
}

fn write_fpca(dir: &Path, res: &FpcaResult) -> Result<()> {
    let k = res.n_components();
    let header = pc_header("t", k);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut comps = Table::create(dir, FPCA_COMPONENTS, &refs)?;
    for (i, &t) in res.grid.iter().enumerate() {
        comps.row(std::iter::once(num(t)).chain((0..k).map(|c| num(res.components[(i, c)]))))?;
    }
    comps.finish()?;

    let mut eig = Table::create(
        dir,
        FPCA_EIGENVALUES,
        &["component", "eigenvalue", "explained_fraction", "cumulative_fraction", "retained"],
    )?;
    let mut cum = 0.0;
    for (c, (&rho, &frac)) in res.eigenvalues.iter().zip(&res.explained_fraction).enumerate() {
        cum += frac;
        eig.row([(c + 1).to_string(), num(rho), num(frac), num(cum), (c < k).to_string()])?;
    }
    eig.finish()?;

    let header = pc_header("gene_id", k);
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut load = Table::create(dir, FPCA_LOADINGS, &refs)?;
    for (i, id) in res.ids.iter().enumerate() {
        load.row(std::iter::once(id.clone()).chain((0..k).map(|c| num(res.loadings[(i, c)]))))?;
    }
    load.finish()
}

fn write_failures(dir: &Path, failures: &[&Failure]) -> Result<()> {
    let mut t = Table::create(dir, FAILURES, &["gene_id", "stage", "kind", "message"])?;
    for f in failures {
        t.row([f.gene_id.as_str(), f.stage.as_str(), f.error.kind(), &f.error.to_string()])?;
    }
    t.finish()
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: Versions,
    command: &'a str,
    seed: u64,
    counts: Counts,
    outputs: Vec<&'static str>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Versions {
    fmem_cli: &'static str,
    fmem: &'static str,
}

#[derive(Serialize)]
struct Counts {
    genes: usize,
    fitted: usize,
    converged: usize,
    failures: usize,
    fpca_components: usize,
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, counts: Counts, outputs: Vec<&'static str>) -> Result<()> {
    let manifest = Manifest {
        tool: Versions {
            fmem_cli: env!("CARGO_PKG_VERSION"),
            fmem: fmem::VERSION,
        },
        command,
        seed: cfg.seed,
        counts,
        outputs,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes every table produced by `outcome` plus the manifest.
pub fn write_outcome(dir: &Path, command: &str, cfg: &RunConfig, outcome: &RunOutcome) -> Result<Vec<&'static str>> {
    ensure_dir(dir)?;
    let mut outputs = vec![FITS, CURVES, COVARIANCE, DIAGNOSTICS];
    write_fits(dir, &outcome.fits, cfg.criterion)?;
    write_diagnostics(dir, &outcome.fits)?;
    if let Some(tests) = &outcome.tests {
        write_tests(dir, tests)?;
        outputs.push(TESTS);
    }
    let mut components = 0;
    if let Some(Ok(FpcaStage { result, .. })) = &outcome.fpca {
        write_fpca(dir, result)?;
        components = result.n_components();
        outputs.extend([FPCA_COMPONENTS, FPCA_EIGENVALUES, FPCA_LOADINGS]);
    }
    let failures = outcome.failures();
    write_failures(dir, &failures)?;
    outputs.push(FAILURES);
    outputs.push(MANIFEST);
    let counts = Counts {
        genes: outcome.ingested,
        fitted: outcome.fits.fits.len(),
        converged: outcome.fits.fits.iter().filter(|g| g.fit.converged).count(),
        failures: failures.len(),
        fpca_components: components,
    };
    write_manifest(dir, command, cfg, counts, outputs.clone())?;
    Ok(outputs)
}

/// Writes synthetic data in the input schema plus the generating curves.
pub fn write_simulation(dir: &Path, cfg: &RunConfig, specs: &[SimulationSpec], genes: &[GeneDataset]) -> Result<Vec<&'static str>> {
    ensure_dir(dir)?;
    let replicated = genes.iter().any(|g| {
        g.individuals()
            .iter()
            .any(|i| i.obs_times.windows(2).any(|w| w[0] == w[1]))
    });
    let mut header = vec!["gene_id", "subject_id", "gender", "age_group", "day", "value"];
    if replicated {
        header.push("replicate");
    }
    let mut t = Table::create(dir, SIMULATED, &header)?;
    for g in genes {
        for ind in g.individuals() {
            let gender = match ind.gender {
                fmem::Gender::Male => "M",
                fmem::Gender::Female => "F",
            };
            let age = match ind.age_group {
                fmem::AgeGroup::Young => "young",
                fmem::AgeGroup::Old => "old",
            };
            let mut rep = 0;
            for (k, (&day, &v)) in ind.obs_times.iter().zip(&ind.values).enumerate() {
                rep = if k > 0 && ind.obs_times[k - 1] == day { rep + 1 } else { 0 };
                let mut row = vec![g.gene_id().to_string(), ind.subject_id.clone(), gender.into(), age.into(), num(day), num(v)];
                if replicated {
                    row.push(rep.to_string());
                }
                t.row(row)?;
            }
        }
    }
    t.finish()?;
    let mut truth = Table::create(dir, SIMULATED_TRUTH, &["gene_id", "day", "mu", "alpha", "beta"])?;
    for s in specs {
        for (k, &day) in s.grid.points().iter().enumerate() {
            truth.row([s.gene_id.clone(), num(day), num(s.mu[k]), num(s.alpha[k]), num(s.beta[k])])?;
        }
    }
    truth.finish()?;
    let outputs = vec![SIMULATED, SIMULATED_TRUTH, MANIFEST];
    let counts = Counts {
        genes: genes.len(),
        fitted: 0,
        converged: 0,
        failures: 0,
        fpca_components: 0,
    };
    write_manifest(dir, "simulate", cfg, counts, outputs.clone())?;
    Ok(outputs)
}
