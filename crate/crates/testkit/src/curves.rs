//! Synthetic curve families with known principal components.

use std::f64::consts::PI;

use fmem::fpca::fine_grid;
use fmem::{CurveMatrix, Normalization};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::instances::normal;

/// `√2 sin(kπt)` on `[0, 1]`: orthonormal in L² and zero at `t = 0`.
pub fn sine_basis(t: f64, k: usize) -> f64 {
    2f64.sqrt() * (k as f64 * PI * t).sin()
}

/// `G` curves `μ(t) + a ξ₁(t) + b ξ₂(t)` with `a ~ N(0, 4)`, `b ~ N(0, 1)`.
pub struct RankTwoFamily {
    pub scores: Vec<(f64, f64)>,
}

impl RankTwoFamily {
    pub fn new(g: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = (0..g).map(|_| (2.0 * normal(&mut rng), normal(&mut rng))).collect();
        Self { scores }
    }

    pub fn curve(&self, i: usize, t: f64) -> f64 {
        let (a, b) = self.scores[i];
        3.0 + t * t + a * sine_basis(t, 1) + b * sine_basis(t, 2)
    }

    pub fn sample(&self, n_grid: usize, normalization: Normalization) -> CurveMatrix {
        let grid = fine_grid(0.0, 1.0, n_grid);
        let values = DMatrix::from_fn(self.scores.len(), n_grid, |i, k| self.curve(i, grid[k]));
        let ids = (0..self.scores.len()).map(|i| format!("c{i:04}")).collect();
        CurveMatrix::new(ids, grid, values, normalization).expect("valid curve matrix")
    }

    /// True component functions on the fine grid, one per column.
    pub fn basis(&self, n_grid: usize) -> DMatrix<f64> {
        let grid = fine_grid(0.0, 1.0, n_grid);
        DMatrix::from_fn(n_grid, 2, |k, c| sine_basis(grid[k], c + 1))
    }
}

/// Largest principal angle between the column spaces of `a` and `b`.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let residual = &qb - &qa * (qa.transpose() * &qb);
    let sin = residual.singular_values().max().min(1.0);
    sin.asin()
}
