//! Box-constrained Nelder–Mead simplex search.
//!
//! Proposals outside the box are clamped onto it. Non-finite objective values
//! are treated as `+∞`.

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop once every vertex is within `x_tol` of the best one …
    pub x_tol: f64,
    /// … and the objective spread is below `f_tol · (|f_best| + f_tol)`.
    pub f_tol: f64,
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Rebuild the simplex around the best vertex when it collapses early;
    /// stops once a restart fails to improve.
    pub restart: bool,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            x_tol: 1e-4,
            f_tol: 1e-10,
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            restart: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

pub fn nelder_mead<F>(
    mut f: F,
    start: &[f64],
    step: f64,
    lower: &[f64],
    upper: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = start.len();
    let clamp = |x: &mut Vec<f64>| {
        for k in 0..dim {
            x[k] = x[k].clamp(lower[k], upper[k]);
        }
    };
    let mut evaluations = 0;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let around = |origin: &[f64], v0: f64, eval: &mut dyn FnMut(&[f64]) -> f64| {
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        simplex.push((origin.to_vec(), v0));
        for k in 0..dim {
            let mut x = origin.to_vec();
            x[k] += step;
            x[k] = x[k].clamp(lower[k], upper[k]);
            if x[k] == origin[k] {
                x[k] = (origin[k] - step).clamp(lower[k], upper[k]);
            }
            let v = eval(&x);
            simplex.push((x, v));
        }
        simplex
    };

    let mut origin = start.to_vec();
    clamp(&mut origin);
    let v0 = eval(&origin);
    let mut simplex = around(&origin, v0, &mut eval);
    let mut restart_value = f64::INFINITY;

    let order = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| a.1.total_cmp(&b.1));
    };
    let mut iterations = 0;
    order(&mut simplex);
    while iterations < opts.max_iter {
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let spread_ok = (worst - best).abs() <= opts.f_tol * (best.abs() + opts.f_tol)
            || (worst == best && best.is_infinite());
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()))
            })
            .fold(0.0f64, f64::max);
        if spread_ok && size <= opts.x_tol {
            let improved = best < restart_value - opts.f_tol * (best.abs() + opts.f_tol);
            if !opts.restart || !improved {
                break;
            }
            restart_value = best;
            let (x0, f0) = simplex[0].clone();
            simplex = around(&x0, f0, &mut eval);
            order(&mut simplex);
            continue;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..dim)
            .map(|k| simplex[..dim].iter().map(|(x, _)| x[k]).sum::<f64>() / dim as f64)
            .collect();
        let toward = |coef: f64, from: &[f64]| -> Vec<f64> {
            let mut x: Vec<f64> = (0..dim)
                .map(|k| centroid[k] + coef * (centroid[k] - from[k]))
                .collect();
            clamp(&mut x);
            x
        };
        let worst_x = simplex[dim].0.clone();
        let xr = toward(opts.reflection, &worst_x);
        let fr = eval(&xr);
        let second_worst = simplex[dim - 1].1;

        if fr < simplex[0].1 {
            let xe = toward(opts.reflection * opts.expansion, &worst_x);
            let fe = eval(&xe);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < second_worst {
            simplex[dim] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst {
                let x = toward(opts.reflection * opts.contraction, &worst_x);
                let v = eval(&x);
                (x, v)
            } else {
                let x = toward(-opts.contraction, &worst_x);
                let v = eval(&x);
                (x, v)
            };
            if fc < fr.min(worst) {
                simplex[dim] = (xc, fc);
            } else {
                let best_x = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let mut x: Vec<f64> = (0..dim)
                        .map(|k| best_x[k] + opts.shrink * (vertex.0[k] - best_x[k]))
                        .collect();
                    clamp(&mut x);
                    let v = eval(&x);
                    *vertex = (x, v);
                }
            }
        }
        order(&mut simplex);
    }

    drop(eval);
    let (x, value) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        value,
        iterations,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let res = nelder_mead(
            |x| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2) + 0.5 * x[0] * x[1],
            &[0.0, 0.0],
            1.0,
            &[-10.0, -10.0],
            &[10.0, 10.0],
            &NelderMeadOptions {
                max_iter: 500,
                ..Default::default()
            },
        );
        // gradient zero: 2(x-1.5)+0.5y = 0, 6(y+0.5)+0.5x = 0
        let det = 2.0 * 6.0 - 0.25;
        let x = (3.0 * 6.0 + 0.5 * 3.0) / det;
        let y = (-3.0 * 2.0 - 0.5 * 3.0) / det;
        assert!((res.x[0] - x).abs() < 1e-3 && (res.x[1] - y).abs() < 1e-3);
    }

    #[test]
    fn respects_bounds() {
        let res = nelder_mead(
            |x| -x[0] - x[1],
            &[0.0, 0.0],
            1.0,
            &[-8.0, -8.0],
            &[12.0, 12.0],
            &NelderMeadOptions::default(),
        );
        assert_eq!(res.x, vec![12.0, 12.0]);
    }

    #[test]
    fn zero_budget_returns_best_initial_vertex() {
        let res = nelder_mead(
            |x| (x[0] - 5.0).powi(2) + x[1].powi(2),
            &[0.0, 0.0],
            1.0,
            &[-8.0, -8.0],
            &[12.0, 12.0],
            &NelderMeadOptions {
                max_iter: 0,
                ..Default::default()
            },
        );
        assert_eq!(res.x, vec![1.0, 0.0]);
        assert_eq!(res.evaluations, 3);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn restart_rebuilds_a_collapsed_simplex() {
        let f = |x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2);
        let opts = NelderMeadOptions { max_iter: 500, ..Default::default() };
        let plain = nelder_mead(f, &[0.0, 0.0], 1.0, &[-8.0, -8.0], &[12.0, 12.0], &opts);
        let restarted = nelder_mead(f, &[0.0, 0.0], 1.0, &[-8.0, -8.0], &[12.0, 12.0], &NelderMeadOptions { restart: true, ..opts });
        assert!(plain.iterations < 500);
        assert!(restarted.evaluations > plain.evaluations);
        assert!(restarted.value <= plain.value);
        assert!(restarted.iterations <= 500);
    }

    #[test]
    fn infinite_values_are_avoided() {
        let res = nelder_mead(
            |x| if x[0] > 2.0 { f64::NAN } else { (x[0] - 1.0).powi(2) + x[1].powi(2) },
            &[0.0, 0.0],
            1.0,
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &NelderMeadOptions {
                max_iter: 300,
                ..Default::default()
            },
        );
        assert!((res.x[0] - 1.0).abs() < 1e-3);
    }
}
