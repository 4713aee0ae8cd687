//! Synthetic genes shaped like the case study: days 1, 14, 28, 90, 180 and
//! 22 individuals, one of them missing the last day.

use fmem::simulate::{case_study_grid, case_study_individuals, evaluate_on_grid, SimulationSpec};

pub const SIGMA: f64 = 0.2;

/// Random intercept and slope in `(t − 90)/90` plus a small stationary
/// component with a 30-day range, which makes `D` full rank.
pub fn random_curve_covariance(points: &[f64]) -> Vec<Vec<f64>> {
    let s: Vec<f64> = points.iter().map(|t| (t - 90.0) / 90.0).collect();
    (0..points.len())
        .map(|r| {
            (0..points.len())
                .map(|c| 0.25 + 0.1 * s[r] * s[c] + 0.05 * (-(points[r] - points[c]).abs() / 30.0).exp())
                .collect()
        })
        .collect()
}

/// Gene with a smooth temporal mean and no gender or age effect.
pub fn null_gene(gene_id: &str, master: u64) -> SimulationSpec {
    let grid = case_study_grid();
    SimulationSpec {
        gene_id: gene_id.into(),
        mu: evaluate_on_grid(&grid, |t| 7.0 + 0.6 * (-t / 30.0).exp()),
        alpha: vec![0.0; grid.len()],
        beta: vec![0.0; grid.len()],
        d_true: random_curve_covariance(grid.points()),
        individuals: case_study_individuals(),
        grid,
        sigma2_true: SIGMA * SIGMA,
        seed: 0,
    }
    .for_gene(gene_id, master)
}

/// As [`null_gene`] with a constant gender effect whose L2 norm over the
/// study period is `ratio` times that of a constant at the residual scale.
pub fn gender_gene(gene_id: &str, master: u64, ratio: f64) -> SimulationSpec {
    let mut spec = null_gene(gene_id, master);
    spec.alpha = vec![ratio * SIGMA; spec.grid.len()];
    spec
}
