//! Functional PCA of fitted mean curves by discretization.
//!
//! Curves are sampled on a fine equally spaced grid with spacing `w`. With
//! `V` the sample covariance of the centered samples, the discrete
//! eigenproblem `w V ξ̃ = ρ ξ̃` approximates the functional one; eigenvalues
//! are `ρ = w λ(V)` and components are scaled so that `w ‖ξ̃‖² = 1`.

use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FmemError, Result};
use crate::estimation::ModelFit;
use crate::spline::NaturalCubicSpline;

/// Default number of fine-grid points.
pub const DEFAULT_GRID_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Subtract each curve's value at the first grid point.
    #[default]
    SubtractFirst,
}

/// Curves sampled on a common equally spaced grid, one row per curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveMatrix {
    pub ids: Vec<String>,
    pub grid: Vec<f64>,
    pub spacing: f64,
    pub values: DMatrix<f64>,
    pub normalization: Normalization,
}

/// `n` equally spaced points from `start` to `end` inclusive.
pub fn fine_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    let w = (end - start) / (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { end } else { start + w * k as f64 })
        .collect()
}

impl CurveMatrix {
    /// Wraps sampled curves; `normalization` is applied here.
    pub fn new(
        ids: Vec<String>,
        grid: Vec<f64>,
        mut values: DMatrix<f64>,
        normalization: Normalization,
    ) -> Result<Self> {
        if grid.len() < 2 || values.ncols() != grid.len() || values.nrows() != ids.len() {
            return Err(FmemError::Dimension(format!(
                "{} ids, {} grid points, curve matrix {}×{}",
                ids.len(),
                grid.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        let spacing = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
        if !(spacing > 0.0) {
            return Err(FmemError::InvalidInput("fine grid must be increasing".into()));
        }
        if normalization == Normalization::SubtractFirst {
            for mut row in values.row_iter_mut() {
                let first = row[0];
                row.add_scalar_mut(-first);
            }
        }
        Ok(Self {
            ids,
            grid,
            spacing,
            values,
            normalization,
        })
    }

    pub fn n_curves(&self) -> usize {
        self.values.nrows()
    }
}

/// Samples every fitted mean curve on `n_grid` points spanning the design grid.
pub fn discretize(fits: &[&ModelFit], n_grid: usize, normalization: Normalization) -> Result<CurveMatrix> {
    let first = fits
        .first()
        .ok_or_else(|| FmemError::InvalidInput("no fits to discretize".into()))?;
    if fits.iter().any(|f| f.grid != first.grid) {
        return Err(FmemError::InconsistentGrids);
    }
    if n_grid < 2 {
        return Err(FmemError::InvalidInput(format!("n_grid must be at least 2, got {n_grid}")));
    }
    let grid = fine_grid(first.grid.start(), first.grid.end(), n_grid);
    let rows: Vec<Vec<f64>> = fits
        .par_iter()
        .map(|f| {
            let spline = NaturalCubicSpline::new(&f.grid, f.mu.as_slice())?;
            Ok(grid.iter().map(|&t| spline.eval(t)).collect())
        })
        .collect::<Result<_>>()?;
    let values = DMatrix::from_fn(fits.len(), n_grid, |i, k| rows[i][k]);
    let ids = fits.iter().map(|f| f.gene_id.clone()).collect();
    CurveMatrix::new(ids, grid, values, normalization)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    Count(usize),
    /// Smallest `K` whose cumulative explained fraction reaches `target`, at most `max`.
    VarianceTarget { target: f64, max: usize },
}

impl Default for Retention {
    fn default() -> Self {
        Retention::VarianceTarget {
            target: 0.999,
            max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpcaResult {
    pub ids: Vec<String>,
    pub grid: Vec<f64>,
    pub spacing: f64,
    /// `n_grid × K`, column `k` is `ξ̃_k`.
    pub components: DMatrix<f64>,
    /// All eigenvalues `ρ`, descending.
    pub eigenvalues: Vec<f64>,
    pub explained_fraction: Vec<f64>,
    /// `G × K`.
    pub loadings: DMatrix<f64>,
    pub mean_curve: DVector<f64>,
}

impl FpcaResult {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
fn sym_eigen_desc(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| FmemError::InvalidInput(format!("eigendecomposition failed: {e:?}")))?;
    let n = a.nrows();
    let s = evd.S().column_vector();
    let u = evd.U();
    let order: Vec<usize> = (0..n).rev().collect();
    let values = order.iter().map(|&i| s[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| u[(r, order[c])]);
    Ok((values, vectors))
}

pub fn decompose(cm: &CurveMatrix, retention: Retention) -> Result<FpcaResult> {
    let g = cm.n_curves();
    let n = cm.grid.len();
    if g < 2 {
        return Err(FmemError::InvalidInput(format!("fPCA needs at least 2 curves, got {g}")));
    }
    let w = cm.spacing;
    let mean_curve = DVector::from_fn(n, |k, _| cm.values.column(k).mean());
    let centered = DMatrix::from_fn(g, n, |i, k| cm.values[(i, k)] - mean_curve[k]);
    let xc = to_faer(&centered);

    // Unit eigenvectors of V = XcᵀXc / G, through the smaller Gram matrix when G < n.
    let (lambdas, unit_vectors): (Vec<f64>, Box<dyn Fn(usize) -> DVector<f64>>) = if g < n {
        let gram = &xc * xc.transpose() * faer::Scale(1.0 / g as f64);
        let (vals, vecs) = sym_eigen_desc(&gram)?;
        let vals: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();
        let scales = vals.clone();
        let proj = xc.transpose() * &vecs;
        let proj = DMatrix::from_fn(n, g, |r, c| proj[(r, c)]);
        (
            vals,
            Box::new(move |k| {
                let col = proj.column(k).into_owned();
                col / (g as f64 * scales[k]).sqrt()
            }),
        )
    } else {
        let cov = xc.transpose() * &xc * faer::Scale(1.0 / g as f64);
        let (vals, vecs) = sym_eigen_desc(&cov)?;
        let vals = vals.into_iter().map(|v| v.max(0.0)).collect();
        let vecs = DMatrix::from_fn(n, n, |r, c| vecs[(r, c)]);
        (vals, Box::new(move |k| vecs.column(k).into_owned()))
    };

    let eigenvalues: Vec<f64> = lambdas.iter().map(|l| w * l).collect();
    let total: f64 = eigenvalues.iter().sum();
    let explained_fraction: Vec<f64> = eigenvalues
        .iter()
        .map(|r| if total > 0.0 { r / total } else { 0.0 })
        .collect();
    let scale = w * cm.values.norm_squared() / g as f64;
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let cutoff = 1e-12 * top.max(scale);
    let rank = eigenvalues.iter().filter(|&&r| r > cutoff && r > 0.0).count();

    let k = match retention {
        Retention::Count(k) if k > rank => {
            return Err(FmemError::TooManyComponents { requested: k, rank })
        }
        Retention::Count(k) => k,
        Retention::VarianceTarget { target, max } => {
            let mut cum = 0.0;
            let mut k = 0;
            while k < rank && k < max && cum < target {
                cum += explained_fraction[k];
                k += 1;
            }
            k
        }
    };

    let mut components = DMatrix::zeros(n, k);
    for c in 0..k {
        let mut xi = unit_vectors(c) / w.sqrt();
        let lead = xi.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            xi.neg_mut();
        }
        components.set_column(c, &xi);
    }
    let loadings = project(&centered, &components)?;
    Ok(FpcaResult {
        ids: cm.ids.clone(),
        grid: cm.grid.clone(),
        spacing: w,
        components,
        eigenvalues,
        explained_fraction,
        loadings,
        mean_curve,
    })
}

/// Least-squares coefficients of each centered row on the component columns.
fn project(centered: &DMatrix<f64>, components: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = components.ncols();
    if k == 0 {
        return Ok(DMatrix::zeros(centered.nrows(), 0));
    }
    let normal = components.transpose() * components;
    let chol = normal.cholesky().ok_or(FmemError::RankDeficient)?;
    let rhs = components.transpose() * centered.transpose();
    Ok(chol.solve(&rhs).transpose())
}

/// Loadings `κ` (`G × K`) of the curves in `cm` on the components of `result`.
pub fn loadings(cm: &CurveMatrix, result: &FpcaResult) -> Result<DMatrix<f64>> {
    if cm.grid.len() != result.mean_curve.len() {
        return Err(FmemError::Dimension("curve grid differs from the fPCA grid".into()));
    }
    let centered = DMatrix::from_fn(cm.n_curves(), cm.grid.len(), |i, k| {
        cm.values[(i, k)] - result.mean_curve[k]
    });
    project(&centered, &result.components)
}

/// Curve rows rebuilt from the mean and the first `k` components.
pub fn reconstruct(result: &FpcaResult, k: usize) -> DMatrix<f64> {
    let comps = result.components.columns(0, k);
    let scores = result.loadings.columns(0, k);
    let mut out = scores * comps.transpose();
    for mut row in out.row_iter_mut() {
        row += result.mean_curve.transpose();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn identical_curves_have_no_variation() {
        let grid = fine_grid(0.0, 1.0, 50);
        let values = DMatrix::from_fn(5, 50, |_, k| (grid[k] * 3.0).sin());
        let cm = CurveMatrix::new(ids(5), grid, values, Normalization::None).unwrap();
        let res = decompose(&cm, Retention::default()).unwrap();
        assert!(res.eigenvalues.iter().all(|&r| r.abs() < 1e-12));
        assert_eq!(res.n_components(), 0);
        assert!(matches!(
            decompose(&cm, Retention::Count(1)),
            Err(FmemError::TooManyComponents { requested: 1, rank: 0 })
        ));
    }

    #[test]
    fn subtract_first_zeroes_first_column() {
        let grid = fine_grid(0.0, 2.0, 11);
        let values = DMatrix::from_fn(3, 11, |i, k| i as f64 + grid[k].powi(2));
        let cm = CurveMatrix::new(ids(3), grid, values, Normalization::SubtractFirst).unwrap();
        assert!(cm.values.column(0).iter().all(|&v| v == 0.0));
        let constant = DMatrix::from_element(2, 11, 4.2);
        let cm = CurveMatrix::new(ids(2), fine_grid(0.0, 2.0, 11), constant, Normalization::SubtractFirst).unwrap();
        assert!(cm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn components_are_normalized_and_orthogonal() {
        let grid = fine_grid(0.0, 1.0, 40);
        let values = DMatrix::from_fn(30, 40, |i, k| {
            let t = grid[k];
            (i as f64 * 0.7).sin() * t + (i as f64 * 1.3).cos() * t * t + 0.1 * (i as f64) * (5.0 * t).sin()
        });
        for g_rows in [30usize, 60] {
            let vals = DMatrix::from_fn(g_rows, 40, |i, k| values[(i % 30, k)] * (1.0 + (i / 30) as f64 * 0.5));
            let cm = CurveMatrix::new(ids(g_rows), grid.clone(), vals, Normalization::None).unwrap();
            let res = decompose(&cm, Retention::Count(3)).unwrap();
            let w = res.spacing;
            for a in 0..3 {
                let ca = res.components.column(a);
                assert!((w * ca.norm_squared() - 1.0).abs() < 1e-10);
                for b in (a + 1)..3 {
                    assert!((w * ca.dot(&res.components.column(b))).abs() < 1e-8);
                }
            }
            let total: f64 = res.explained_fraction.iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!(res.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn loadings_of_mean_and_shifted_curves() {
        let grid = fine_grid(0.0, 1.0, 25);
        let values = DMatrix::from_fn(20, 25, |i, k| {
            let t = grid[k];
            (i as f64).sin() * t + (i as f64 * 0.3).cos() * (3.0 * t).sin()
        });
        let cm = CurveMatrix::new(ids(20), grid.clone(), values, Normalization::None).unwrap();
        let res = decompose(&cm, Retention::Count(2)).unwrap();
        let xi1 = res.components.column(0).into_owned();
        let probe = DMatrix::from_fn(2, 25, |i, k| res.mean_curve[k] + if i == 1 { 2.0 * xi1[k] } else { 0.0 });
        let probe_cm = CurveMatrix::new(ids(2), grid, probe, Normalization::None).unwrap();
        let kappa = loadings(&probe_cm, &res).unwrap();
        assert!(kappa.row(0).amax() < 1e-10);
        assert!((kappa[(1, 0)] - 2.0).abs() < 1e-10 && kappa[(1, 1)].abs() < 1e-10);
    }
}
