//! Natural cubic spline by a dense solve of the full piecewise system.

use nalgebra::{DMatrix, DVector};

/// Coefficients `[a, b, c, d]` of `a + b s + c s² + d s³`, `s = t − knot`, per interval.
pub fn piecewise_coefficients(knots: &[f64], values: &[f64]) -> Vec<[f64; 4]> {
    let m = knots.len();
    let pieces = m - 1;
    let n = 4 * pieces;
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    let col = |r: usize, k: usize| 4 * r + k;
    let mut row = 0;
    for r in 0..pieces {
        let h = knots[r + 1] - knots[r];
        a[(row, col(r, 0))] = 1.0;
        rhs[row] = values[r];
        row += 1;
        for k in 0..4 {
            a[(row, col(r, k))] = h.powi(k as i32);
        }
        rhs[row] = values[r + 1];
        row += 1;
        if r + 1 < pieces {
            a[(row, col(r, 1))] = 1.0;
            a[(row, col(r, 2))] = 2.0 * h;
            a[(row, col(r, 3))] = 3.0 * h * h;
            a[(row, col(r + 1, 1))] = -1.0;
            row += 1;
            a[(row, col(r, 2))] = 2.0;
            a[(row, col(r, 3))] = 6.0 * h;
            a[(row, col(r + 1, 2))] = -2.0;
            row += 1;
        }
    }
    a[(row, col(0, 2))] = 2.0;
    row += 1;
    let h_last = knots[m - 1] - knots[m - 2];
    a[(row, col(pieces - 1, 2))] = 2.0;
    a[(row, col(pieces - 1, 3))] = 6.0 * h_last;
    row += 1;
    assert_eq!(row, n);
    let sol = a.lu().solve(&rhs).expect("spline system is nonsingular");
    (0..pieces)
        .map(|r| [sol[col(r, 0)], sol[col(r, 1)], sol[col(r, 2)], sol[col(r, 3)]])
        .collect()
}

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// `∫ (f″)²` over the knot span by three-point Gauss–Legendre per interval.
pub fn roughness_by_quadrature(knots: &[f64], values: &[f64]) -> f64 {
    let coeffs = piecewise_coefficients(knots, values);
    let mut total = 0.0;
    for (r, c) in coeffs.iter().enumerate() {
        let h = knots[r + 1] - knots[r];
        for (x, w) in GAUSS3 {
            let s = 0.5 * h * (x + 1.0);
            let second = 2.0 * c[2] + 6.0 * c[3] * s;
            total += 0.5 * h * w * second * second;
        }
    }
    total
}

/// Evaluates the piecewise cubic inside the knot span.
pub fn evaluate(knots: &[f64], coeffs: &[[f64; 4]], t: f64) -> f64 {
    let r = knots[1..knots.len() - 1]
        .iter()
        .take_while(|&&k| k <= t)
        .count();
    let s = t - knots[r];
    let c = coeffs[r];
    c[0] + s * (c[1] + s * (c[2] + s * c[3]))
}
