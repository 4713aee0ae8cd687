use std::fs;
use std::path::Path;
use std::process::Command as Process;

use fmem::simulate::{balanced_individuals, case_study_grid, generate, SimulationSpec};
use fmem::{AgeGroup, FmemError, Gender};
use fmem_cli::cli::{execute, Command};
use fmem_cli::ingest::{ingest_path, ingest_reader};
use fmem_cli::output::{self, num};
use fmem_cli::pipeline::{run_fit, run_fpca, simulate_batch, simulation_specs, Stages};
use fmem_cli::{run, CliError, Ingested, RunConfig};

const HEADER: &str = "gene_id,subject_id,gender,age_group,day,value\n";

fn case_study_csv() -> String {
    let days = [1, 14, 28, 90, 180];
    let mut s = HEADER.to_string();
    for i in 0..22 {
        let gender = if i % 2 == 0 { "F" } else { "M" };
        let age = if i % 4 < 2 { "old" } else { "young" };
        for (k, d) in days.iter().enumerate() {
            if i == 21 && k == 4 {
                continue;
            }
            s.push_str(&format!("g1,s{i:02},{gender},{age},{d},{}\n", 7.0 + 0.01 * (i * k) as f64));
        }
    }
    s
}

fn ingest(text: &str) -> fmem_cli::Result<Ingested> {
    ingest_reader(text.as_bytes(), 55.0)
}

fn line_error(text: &str) -> u64 {
    match ingest(text) {
        Err(CliError::Ingest { line, .. }) => line,
        other => panic!("expected an ingest error, got {other:?}"),
    }
}

#[test]
fn partial_series_are_kept() {
    let got = ingest(&case_study_csv()).unwrap();
    assert_eq!(got.genes.len(), 1);
    assert!(got.rejected.is_empty());
    let gene = &got.genes[0];
    assert_eq!(gene.n_obs(), 109);
    assert_eq!(gene.n_individuals(), 22);
    assert_eq!(gene.grid().points(), &[1.0, 14.0, 28.0, 90.0, 180.0]);
}

#[test]
fn malformed_input_is_rejected_with_line_numbers() {
    assert!(matches!(ingest(""), Err(CliError::EmptyInput)));
    assert!(matches!(ingest(HEADER), Err(CliError::EmptyInput)));
    assert_eq!(line_error("gene_id,subject_id,gender,age_group,day\ng,s,M,old,1\n"), 1);
    assert_eq!(line_error("gene_id,subject_id,gender,age_group,day,value,batch\n"), 1);
    assert_eq!(line_error("gene_id,subject_id,gender,day,value\ng,s,M,1,2\n"), 1);
    let bad_gender = format!("{HEADER}g,s1,F,old,1,2\ng,s2,X,old,1,2\n");
    assert_eq!(line_error(&bad_gender), 3);
    let bad_age = format!("{HEADER}g,s1,F,middle,1,2\n");
    assert_eq!(line_error(&bad_age), 2);
    let bad_value = format!("{HEADER}g,s1,F,old,1,2\ng,s1,F,old,14,NA\n");
    assert_eq!(line_error(&bad_value), 3);
    let bad_day = format!("{HEADER}g,s1,F,old,day1,2\n");
    assert_eq!(line_error(&bad_day), 2);
    let duplicate = format!("{HEADER}g,s1,F,old,1,2\ng,s2,M,old,1,2\ng,s1,F,old,1,3\n");
    assert_eq!(line_error(&duplicate), 4);
    let relabeled = format!("{HEADER}g,s1,F,old,1,2\ng,s1,M,old,14,2\n");
    assert_eq!(line_error(&relabeled), 3);
}

#[test]
fn ages_and_replicates_are_read() {
    let text = "gene_id,subject_id,gender,age,day,value,replicate\n\
        g,a,F,55,1,1.0,0\ng,a,F,55,1,1.5,1\ng,a,F,55,2,1.0,0\ng,a,F,55,3,1.0,0\n\
        g,b,M,56,1,2.0,0\ng,b,M,56,2,2.0,0\ng,b,M,56,3,2.0,0\n\
        g,c,M,20,1,2.0,0\ng,c,M,20,2,2.0,0\n\
        g,d,F,80,3,2.0,0\n";
    let got = ingest(text).unwrap();
    let gene = &got.genes[0];
    let a = &gene.individuals()[0];
    assert_eq!((a.gender, a.age_group), (Gender::Female, AgeGroup::Young));
    assert_eq!(a.obs_times, vec![1.0, 1.0, 2.0, 3.0]);
    assert_eq!(a.values, vec![1.0, 1.5, 1.0, 1.0]);
    assert_eq!(gene.individuals()[1].age_group, AgeGroup::Old);
    assert_eq!(gene.n_obs(), 10);
}

#[test]
fn single_gender_gene_is_isolated() {
    let mut text = case_study_csv();
    for i in 0..6 {
        let age = if i < 3 { "old" } else { "young" };
        for d in [1, 14, 28] {
            text.push_str(&format!("g2,m{i},M,{age},{d},{}\n", 1.0 + 0.1 * i as f64));
        }
    }
    let got = ingest(&text).unwrap();
    assert_eq!(got.genes.len(), 1);
    assert_eq!(got.rejected.len(), 1);
    assert_eq!(got.rejected[0].gene_id, "g2");
    assert_eq!(got.rejected[0].error, FmemError::Inestimable(fmem::Factor::Gender));
    let cfg = RunConfig {
        budget: 5,
        workers: 1,
        ..RunConfig::default()
    };
    let outcome = run(got, &cfg, Stages { tests: false, fpca: false }).unwrap();
    assert_eq!(outcome.fits.fits.len(), 1);
    let failures = outcome.failures();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].error.kind(), "inestimable_gender");
}

fn small_config(dir: &Path, workers: usize) -> RunConfig {
    let mut cfg = RunConfig {
        output: dir.to_path_buf(),
        permutations: 4,
        n_grid: 100,
        budget: 30,
        workers,
        seed: 17,
        ..RunConfig::default()
    };
    cfg.simulate.genes = 6;
    cfg.simulate.planted_genes = 2;
    cfg
}

fn tables(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for workers in [1, 3] {
        let dir = tmp.path().join(format!("w{workers}"));
        let cfg = small_config(&dir, workers);
        let batch = simulate_batch(&cfg.simulate, cfg.seed).unwrap();
        let outcome = run(batch, &cfg, Stages { tests: true, fpca: true }).unwrap();
        output::write_outcome(&dir, "all", &cfg, &outcome).unwrap();
        runs.push(tables(&dir));
    }
    assert_eq!(runs[0].len(), 9);
    assert_eq!(runs[0], runs[1]);
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn parse(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn tables_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 2);
    let specs = simulation_specs(&cfg.simulate, cfg.seed).unwrap();
    let batch = simulate_batch(&cfg.simulate, cfg.seed).unwrap();
    output::write_simulation(tmp.path(), &cfg, &specs, &batch.genes).unwrap();
    let back = ingest_path(&tmp.path().join(output::SIMULATED), cfg.age_cutoff).unwrap();
    assert_eq!(back.genes, batch.genes);

    let outcome = run(back, &cfg, Stages { tests: true, fpca: true }).unwrap();
    output::write_outcome(tmp.path(), "all", &cfg, &outcome).unwrap();
    let fits = read_rows(&tmp.path().join(output::FITS));
    assert_eq!(fits.len(), 6);
    for (row, g) in fits.iter().zip(&outcome.fits.fits) {
        assert_eq!(&row[0], g.fit.gene_id);
        assert_eq!(parse(&row[5]).to_bits(), g.fit.sp.lambda.to_bits());
        assert_eq!(parse(&row[8]).to_bits(), g.fit.vc.sigma2.to_bits());
        assert_eq!(parse(&row[7]).to_bits(), g.fit.loglik.to_bits());
    }
    let curves = read_rows(&tmp.path().join(output::CURVES));
    assert_eq!(curves.len(), 30);
    let first = &outcome.fits.fits[0];
    for k in 0..5 {
        assert_eq!(parse(&curves[k][2]), first.fit.mu[k]);
        assert_eq!(parse(&curves[k][3]), first.fit.alpha[k]);
        assert!(parse(&curves[k][7]) <= first.fit.mu[k] && first.fit.mu[k] <= parse(&curves[k][8]));
    }
    let tests = read_rows(&tmp.path().join(output::TESTS));
    assert_eq!(tests.len(), 18);
    let rows = &outcome.tests.as_ref().unwrap().rows;
    for (row, r) in tests.iter().zip(rows) {
        assert_eq!(parse(&row[2]).to_bits(), r.statistic.to_bits());
        assert_eq!(parse(&row[3]).to_bits(), r.p_value.to_bits());
        assert_eq!(parse(&row[4]).to_bits(), r.q_value.to_bits());
    }
    let loadings = read_rows(&tmp.path().join(output::FPCA_LOADINGS));
    let fpca = outcome.fpca.as_ref().unwrap().as_ref().unwrap();
    assert_eq!(loadings.len(), 6);
    assert_eq!(loadings[0].len(), 1 + fpca.result.n_components());
    let components = read_rows(&tmp.path().join(output::FPCA_COMPONENTS));
    assert_eq!(components.len(), 100);
    let manifest: toml::Value = toml::from_str(&fs::read_to_string(tmp.path().join(output::MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(17));
    assert_eq!(manifest["counts"]["fitted"].as_integer(), Some(6));
    assert_eq!(manifest["config"]["permutations"].as_integer(), Some(4));
    assert_eq!(num(0.1), "1.0000000000000001e-1");
}

#[test]
fn synthetic_batch_fits_every_gene_with_centred_residuals() {
    let mut cfg = RunConfig {
        workers: 1,
        seed: 1,
        ..RunConfig::default()
    };
    cfg.simulate.genes = 100;
    let batch = simulate_batch(&cfg.simulate, cfg.seed).unwrap();
    let stage = run_fit(&batch.genes, &cfg);
    assert_eq!(stage.fits.len(), 100);
    assert!(stage.failures.is_empty(), "{:?}", stage.failures);
    for g in stage.fits.iter().filter(|g| g.fit.converged) {
        let r = g.fit.standardized_residuals();
        assert!(r.mean().abs() <= 0.2, "{}: {}", g.fit.gene_id, r.mean());
    }
}

fn family(coeffs: &[(f64, f64)], shape: impl Fn(f64, f64, f64) -> f64) -> Ingested {
    let grid = case_study_grid();
    let m = grid.len();
    let genes = coeffs
        .iter()
        .enumerate()
        .map(|(g, &(a, b))| {
            let spec = SimulationSpec {
                gene_id: format!("f{g:02}"),
                mu: grid.points().iter().map(|&t| shape(t, a, b)).collect(),
                alpha: vec![0.0; m],
                beta: vec![0.0; m],
                d_true: (0..m).map(|r| (0..m).map(|c| if r == c { 1e-6 } else { 0.0 }).collect()).collect(),
                grid: grid.clone(),
                individuals: balanced_individuals(8),
                sigma2_true: 1e-8,
                seed: g as u64,
            };
            generate(&spec).unwrap().0
        })
        .collect();
    Ingested {
        genes,
        rejected: Vec::new(),
    }
}

#[test]
fn fpca_stage_follows_the_curve_family() {
    let coeffs: Vec<(f64, f64)> = (0..12)
        .map(|g| ((g as f64 * 1.7).sin() * 2.0, (g as f64 * 0.9).cos()))
        .collect();
    let cfg = RunConfig {
        budget: 10,
        workers: 1,
        n_grid: 200,
        ..RunConfig::default()
    };
    let two = family(&coeffs, |t, a, b| 5.0 + a * (t / 60.0).sin() + b * (t / 180.0).powi(2));
    let fits = run_fit(&two.genes, &cfg);
    let res = run_fpca(&fits.fits, &cfg).unwrap().result;
    assert!(res.explained_fraction[0] > res.explained_fraction[1]);
    assert!(res.explained_fraction[..2].iter().sum::<f64>() > 0.999);

    let one = family(&coeffs, |t, a, _| 5.0 + a * t / 180.0);
    let fits = run_fit(&one.genes, &cfg);
    let res = run_fpca(&fits.fits, &cfg).unwrap().result;
    assert_eq!(res.n_components(), 1);
    assert_eq!(res.loadings.shape(), (12, 1));
    assert!(res.explained_fraction[0] > 0.9999);

    assert!(run_fpca(&fits.fits[..1], &cfg).is_err());
}

#[test]
fn config_files_and_validation() {
    let cfg = RunConfig::from_toml("criterion = \"AIC\"\npermutations = 8\n[simulate]\ngenes = 3\n").unwrap();
    assert_eq!(cfg.criterion, fmem::Criterion::Aic);
    assert_eq!(cfg.permutations, 8);
    assert_eq!(cfg.simulate.genes, 3);
    assert_eq!(cfg.fdr, 0.10);
    assert_eq!(cfg.n_grid, 1000);
    assert!(RunConfig::from_toml("permutation = 8\n").is_err());
    for bad in [
        RunConfig { fdr: 1.5, ..RunConfig::default() },
        RunConfig { workers: 0, ..RunConfig::default() },
        RunConfig { n_grid: 1, ..RunConfig::default() },
        RunConfig {
            band_method: fmem::BandMethod::Bootstrap,
            bootstrap_replicates: 50,
            ..RunConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(CliError::Config(_))));
    }
    let round = toml::to_string(&RunConfig::default()).unwrap();
    assert_eq!(RunConfig::from_toml(&round).unwrap(), RunConfig::default());
}

#[test]
fn missing_input_is_a_config_error() {
    let cfg = RunConfig::default();
    assert!(matches!(execute(Command::Fit, &cfg), Err(CliError::Config(_))));
}

#[test]
fn binary_runs_and_reports_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_fmem");
    let config = tmp.path().join("run.toml");
    fs::write(&config, "permutations = 2\nbudget = 5\nn_grid = 50\nseed = 3\n[simulate]\ngenes = 4\nplanted_genes = 1\n").unwrap();
    let sim = tmp.path().join("sim");
    let status = Process::new(bin)
        .args(["simulate", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(&sim)
        .status()
        .unwrap();
    assert!(status.success());
    let out = tmp.path().join("out");
    let run = Process::new(bin)
        .args(["all", "--workers", "2", "--config"])
        .arg(&config)
        .arg("--input")
        .arg(sim.join(output::SIMULATED))
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.join(output::TESTS).exists());
    assert!(out.join(output::FPCA_LOADINGS).exists());

    let failed = Process::new(bin)
        .args(["fit", "--input"])
        .arg(tmp.path().join("absent.csv"))
        .output()
        .unwrap();
    assert!(!failed.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&failed.stderr).unwrap();
    assert_eq!(summary["status"], "error");
    assert_eq!(summary["kind"], "io");

    let bad = Process::new(bin).args(["fit", "--fdr", "2"]).output().unwrap();
    assert!(!bad.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(summary["kind"], "config");
}
