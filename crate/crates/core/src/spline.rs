//! Cubic smoothing-spline machinery on the design time points.
//!
//! The roughness matrix `G = A B⁻¹ Aᵀ` satisfies `∫ f''(t)² dt = fᵀ G f` for
//! the natural cubic spline interpolating `f` at the grid points. The same
//! `A` and `B` give the interior second derivatives of that spline
//! (`B m = Aᵀ f`), so interpolation and the penalty share one construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FmemError, Result};
use crate::linalg::{symmetrize, SymTridiagonal};

/// Absolute tolerance (days) used when snapping observation times to design points.
pub const SNAP_TOLERANCE: f64 = 1e-9;

/// Strictly increasing design time points `τ₁ < … < τ_M`, `M ≥ 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 3 {
            return Err(FmemError::GridTooShort(points.len()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(FmemError::NonFinite("time grid"));
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(FmemError::NonIncreasingGrid(i + 1));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// `h_r = τ_{r+1} − τ_r`.
    pub fn spacings(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the design point within [`SNAP_TOLERANCE`] of `t`.
    pub fn snap(&self, t: f64) -> Result<usize> {
        if !t.is_finite() {
            return Err(FmemError::NonFinite("observation time"));
        }
        let idx = self.points.partition_point(|&p| p < t);
        let mut best: Option<(usize, f64)> = None;
        for cand in [idx.wrapping_sub(1), idx] {
            if let Some(&p) = self.points.get(cand) {
                let dist = (p - t).abs();
                if best.is_none_or(|(_, d)| dist < d) {
                    best = Some((cand, dist));
                }
            }
        }
        match best {
            Some((i, d)) if d <= SNAP_TOLERANCE => Ok(i),
            _ => Err(FmemError::OffGrid(t)),
        }
    }

    /// Index of the interval `[τ_r, τ_{r+1}]` holding `t`, clamped to the ends.
    fn interval(&self, t: f64) -> usize {
        let m = self.points.len();
        self.points.partition_point(|&p| p <= t).clamp(1, m - 1) - 1
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = FmemError;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        TimeGrid::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.points
    }
}

/// `G = A B⁻¹ Aᵀ` together with its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughnessMatrix {
    pub g: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: SymTridiagonal,
}

pub fn build_roughness(grid: &TimeGrid) -> Result<RoughnessMatrix> {
    let m = grid.len();
    let h = grid.spacings();
    let inner = m - 2;

    let mut a = DMatrix::zeros(m, inner);
    for r in 0..inner {
        a[(r, r)] = 1.0 / h[r];
        a[(r + 1, r)] = -(1.0 / h[r] + 1.0 / h[r + 1]);
        a[(r + 2, r)] = 1.0 / h[r + 1];
    }
    let diag = (0..inner).map(|r| (h[r] + h[r + 1]) / 3.0).collect();
    let off = (1..inner).map(|r| h[r] / 6.0).collect();
    let b = SymTridiagonal::new(diag, off);

    // B⁻¹Aᵀ column by column, never forming B⁻¹.
    let mut binv_at = DMatrix::zeros(inner, m);
    for j in 0..m {
        let col: Vec<f64> = a.row(j).iter().copied().collect();
        let sol = b.solve(&col)?;
        for (i, v) in sol.into_iter().enumerate() {
            binv_at[(i, j)] = v;
        }
    }
    let mut g = &a * binv_at;
    symmetrize(&mut g);
    Ok(RoughnessMatrix { g, a, b })
}

/// One row per observation holding the column of its design point.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IncidenceMatrix {
    columns: Vec<usize>,
    n_cols: usize,
}

impl IncidenceMatrix {
    pub fn from_columns(columns: Vec<usize>, n_cols: usize) -> Result<Self> {
        if let Some(&c) = columns.iter().find(|&&c| c >= n_cols) {
            return Err(FmemError::Dimension(format!(
                "incidence column {c} outside a grid of {n_cols} points"
            )));
        }
        Ok(Self { columns, n_cols })
    }

    pub fn rows(&self) -> usize {
        self.columns.len()
    }

    pub fn cols(&self) -> usize {
        self.n_cols
    }

    /// Design-point index of each observation, in observation order.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows(), self.n_cols);
        for (r, &c) in self.columns.iter().enumerate() {
            out[(r, c)] = 1.0;
        }
        out
    }
}

pub fn build_incidence(grid: &TimeGrid, obs_times: &[f64]) -> Result<IncidenceMatrix> {
    let columns = obs_times
        .iter()
        .map(|&t| grid.snap(t))
        .collect::<Result<Vec<_>>>()?;
    IncidenceMatrix::from_columns(columns, grid.len())
}

/// Natural cubic spline through `(τ_m, f_m)`; linear beyond the end knots.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalCubicSpline {
    knots: TimeGrid,
    values: Vec<f64>,
    // per interval: f(τ_r + s) = c0 + c1 s + c2 s² + c3 s³
    coeffs: Vec<[f64; 4]>,
}

impl NaturalCubicSpline {
    pub fn new(knots: &TimeGrid, values: &[f64]) -> Result<Self> {
        let m = knots.len();
        if values.len() != m {
            return Err(FmemError::Dimension(format!(
                "{} spline values for {m} knots",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FmemError::NonFinite("spline values"));
        }
        let h = knots.spacings();
        // Aᵀ f, then interior second derivatives from B m = Aᵀ f.
        let rhs: Vec<f64> = (0..m - 2)
            .map(|r| {
                (values[r + 2] - values[r + 1]) / h[r + 1] - (values[r + 1] - values[r]) / h[r]
            })
            .collect();
        let diag = (0..m - 2).map(|r| (h[r] + h[r + 1]) / 3.0).collect();
        let off = (1..m - 2).map(|r| h[r] / 6.0).collect();
        let interior = SymTridiagonal::new(diag, off).solve(&rhs)?;
        let mut second = Vec::with_capacity(m);
        second.push(0.0);
        second.extend(interior);
        second.push(0.0);

        let coeffs = (0..m - 1)
            .map(|r| {
                let (f0, f1) = (values[r], values[r + 1]);
                let (m0, m1) = (second[r], second[r + 1]);
                [
                    f0,
                    (f1 - f0) / h[r] - h[r] * (2.0 * m0 + m1) / 6.0,
                    m0 / 2.0,
                    (m1 - m0) / (6.0 * h[r]),
                ]
            })
            .collect();
        Ok(Self {
            knots: knots.clone(),
            values: values.to_vec(),
            coeffs,
        })
    }

    pub fn knots(&self) -> &TimeGrid {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Polynomial coefficients of each interval in the local variable `s = t − τ_r`.
    pub fn coefficients(&self) -> &[[f64; 4]] {
        &self.coeffs
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.derivative(t, 0)
    }

    /// `order`-th derivative at `t` (orders above 3 are zero).
    pub fn derivative(&self, t: f64, order: usize) -> f64 {
        let pts = self.knots.points();
        let last = self.coeffs.len() - 1;
        if t < pts[0] || t > pts[pts.len() - 1] {
            // Linear continuation with the end slope.
            let (anchor, value, slope) = if t < pts[0] {
                let c = &self.coeffs[0];
                (pts[0], c[0], c[1])
            } else {
                let h = pts[last + 1] - pts[last];
                let c = &self.coeffs[last];
                let slope = c[1] + 2.0 * c[2] * h + 3.0 * c[3] * h * h;
                (pts[last + 1], self.values[last + 1], slope)
            };
            return match order {
                0 => value + slope * (t - anchor),
                1 => slope,
                _ => 0.0,
            };
        }
        let r = self.knots.interval(t);
        let s = t - pts[r];
        let poly = derive(self.coeffs[r], order);
        poly[0] + s * (poly[1] + s * (poly[2] + s * poly[3]))
    }

    /// Exact `∫_{τ₁}^{τ_M} (f^{(order)}(t))² dt` by piecewise polynomial integration.
    pub fn squared_integral(&self, order: usize) -> f64 {
        let h = self.knots.spacings();
        self.coeffs
            .iter()
            .zip(&h)
            .map(|(&c, &len)| integrate_square(derive(c, order), len))
            .sum()
    }
}

fn derive(c: [f64; 4], order: usize) -> [f64; 4] {
    let mut p = c;
    for _ in 0..order {
        p = [p[1], 2.0 * p[2], 3.0 * p[3], 0.0];
    }
    p
}

/// `∫₀^len (Σ pₖ sᵏ)² ds`.
fn integrate_square(p: [f64; 4], len: f64) -> f64 {
    let mut total = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (j, &pj) in p.iter().enumerate() {
            let k = (i + j + 1) as i32;
            total += pi * pj * len.powi(k) / k as f64;
        }
    }
    total
}

/// `∫ f''(t)² dt` over the grid span.
pub fn roughness_functional(spline: &NaturalCubicSpline) -> f64 {
    spline.squared_integral(2)
}

/// L2 norm of the spline (`derivative_order` 0) or of its first derivative
/// (`derivative_order` 1) over `[τ₁, τ_M]`.
pub fn l2_norm(spline: &NaturalCubicSpline, derivative_order: usize) -> f64 {
    spline.squared_integral(derivative_order).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn case_grid() -> TimeGrid {
        TimeGrid::new(vec![1.0, 14.0, 28.0, 90.0, 180.0]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert_eq!(TimeGrid::new(vec![0.0, 1.0]), Err(FmemError::GridTooShort(2)));
        assert_eq!(
            TimeGrid::new(vec![0.0, 1.0, 1.0]),
            Err(FmemError::NonIncreasingGrid(2))
        );
        assert_eq!(
            TimeGrid::new(vec![0.0, 2.0, 1.0]),
            Err(FmemError::NonIncreasingGrid(2))
        );
        assert_eq!(case_grid().spacings(), vec![13.0, 14.0, 62.0, 90.0]);
    }

    #[test]
    fn three_point_roughness_by_hand() {
        let grid = TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let r = build_roughness(&grid).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.5, -3.0, 1.5, -3.0, 6.0, -3.0, 1.5, -3.0, 1.5]);
        assert!((r.g - expected).abs().max() < 1e-14);
        assert_eq!(r.b.diag(), &[2.0 / 3.0]);
    }

    #[test]
    fn roughness_annihilates_linear_functions() {
        let grid = case_grid();
        let g = build_roughness(&grid).unwrap().g;
        let ones = DVector::from_element(5, 3.7);
        assert!((&g * ones).amax() < 1e-12);
        let t = DVector::from_row_slice(grid.points());
        assert!(t.dot(&(&g * &t)).abs() < 1e-10);
    }

    #[test]
    fn roughness_rank_and_symmetry() {
        let grid = TimeGrid::new(vec![0.0, 0.3, 1.1, 2.0, 2.2, 4.0, 7.5]).unwrap();
        let g = build_roughness(&grid).unwrap().g;
        assert!((&g - g.transpose()).amax() < 1e-12);
        let eig = g.symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let nonzero = eig.eigenvalues.iter().filter(|&&e| e > 1e-10 * max).count();
        assert_eq!(nonzero, 5);
        assert!(eig.eigenvalues.min() > -1e-10 * max);
    }

    #[test]
    fn appendix_incidence_example() {
        let grid = case_grid();
        let x = build_incidence(&grid, &[1.0, 14.0, 28.0, 90.0]).unwrap();
        let mut expected = DMatrix::zeros(4, 5);
        for i in 0..4 {
            expected[(i, i)] = 1.0;
        }
        assert_eq!(x.to_dense(), expected);
        let full = build_incidence(&grid, grid.points()).unwrap();
        assert_eq!(full.to_dense(), DMatrix::identity(5, 5));
        let dup = build_incidence(&grid, &[1.0, 14.0, 14.0]).unwrap();
        assert_eq!(dup.columns(), &[0, 1, 1]);
    }

    #[test]
    fn incidence_snaps_within_tolerance_only() {
        let grid = case_grid();
        assert_eq!(grid.snap(14.0 + 5e-10).unwrap(), 1);
        assert_eq!(grid.snap(90.0 - 1e-10).unwrap(), 3);
        assert_eq!(build_incidence(&grid, &[15.0]), Err(FmemError::OffGrid(15.0)));
        assert_eq!(build_incidence(&grid, &[-3.0]), Err(FmemError::OffGrid(-3.0)));
        assert_eq!(grid.snap(200.0), Err(FmemError::OffGrid(200.0)));
    }

    #[test]
    fn spline_interpolates_and_is_natural() {
        let grid = case_grid();
        let vals = [0.3, -1.0, 2.5, 0.7, 1.9];
        let s = NaturalCubicSpline::new(&grid, &vals).unwrap();
        for (t, v) in grid.points().iter().zip(vals) {
            assert!((s.eval(*t) - v).abs() < 1e-12);
        }
        assert!(s.derivative(1.0, 2).abs() < 1e-14);
        assert!(s.derivative(180.0, 2).abs() < 1e-12);
        // C² continuity at an interior knot
        let eps = 1e-7;
        assert!((s.derivative(28.0 - eps, 2) - s.derivative(28.0 + eps, 2)).abs() < 1e-6);
        assert!((s.derivative(28.0 - eps, 1) - s.derivative(28.0 + eps, 1)).abs() < 1e-6);
    }

    #[test]
    fn l2_norm_examples() {
        let grid = TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let zero = NaturalCubicSpline::new(&grid, &[0.0; 3]).unwrap();
        assert_eq!(l2_norm(&zero, 0), 0.0);
        let linear = NaturalCubicSpline::new(&grid, &[0.0, 1.0, 2.0]).unwrap();
        assert!((l2_norm(&linear, 1) - 2f64.sqrt()).abs() < 1e-14);
        assert!(roughness_functional(&linear).abs() < 1e-14);

        let case = case_grid();
        let c = -2.5;
        let constant = NaturalCubicSpline::new(&case, &[c; 5]).unwrap();
        assert!((l2_norm(&constant, 0) - c.abs() * 179f64.sqrt()).abs() < 1e-10);
        assert_eq!(roughness_functional(&constant), 0.0);
    }

    #[test]
    fn roughness_identity_on_case_grid() {
        let grid = case_grid();
        let f = [0.3, -1.0, 2.5, 0.7, 1.9];
        let g = build_roughness(&grid).unwrap().g;
        let fv = DVector::from_row_slice(&f);
        let quad = fv.dot(&(&g * &fv));
        let integral = roughness_functional(&NaturalCubicSpline::new(&grid, &f).unwrap());
        assert!((quad - integral).abs() <= 1e-10 * integral.abs());
    }

    #[test]
    fn mismatched_values_rejected() {
        let grid = case_grid();
        assert!(matches!(
            NaturalCubicSpline::new(&grid, &[1.0, 2.0]),
            Err(FmemError::Dimension(_))
        ));
    }
}
