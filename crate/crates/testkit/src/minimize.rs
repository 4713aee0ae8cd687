//! Powell's conjugate-direction method with Brent line searches.

pub struct PowellOptions {
    pub max_iter: usize,
    /// Relative decrease below which the search stops.
    pub f_tol: f64,
    /// Initial bracketing step of each line search.
    pub step: f64,
}

impl Default for PowellOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            f_tol: 1e-15,
            step: 1.0,
        }
    }
}

fn along(x: &[f64], d: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Brent minimization on `[a, c]` given an interior point `b` with lower value.
fn brent<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, c: f64, fb: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut lo, mut hi) = if a < c { (a, c) } else { (c, a) };
    let (mut x, mut w, mut v) = (b, b, b);
    let (mut fx, mut fw, mut fv) = (fb, fb, fb);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let tol1 = 1e-11 * x.abs() + 1e-15;
        let tol2 = 2.0 * tol1;
        if (x - mid).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (lo - x) && p < q * (hi - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = if mid > x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= mid { lo - x } else { hi - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                lo = x;
            } else {
                hi = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    (x, fx)
}

/// Minimizes `t ↦ f(x + t d)`, returning `(t, value)`.
fn line_search<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], d: &[f64], f0: f64, step: f64) -> (f64, f64) {
    let mut g = |t: f64| f(&along(x, d, t));
    let (mut a, mut fa) = (0.0, f0);
    let (mut b, mut fb) = (step, g(step));
    if fb > fa {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = b + 1.618_034 * (b - a);
    let mut fc = g(c);
    let mut guard = 0;
    while fc < fb && guard < 200 {
        a = b;
        fa = fb;
        b = c;
        fb = fc;
        c = b + 1.618_034 * (b - a);
        fc = g(c);
        guard += 1;
    }
    let _ = fa;
    if !(fb < f0) && fb >= fc {
        return (0.0, f0);
    }
    brent(&mut g, a, b, c, fb)
}

/// Minimizes `f` from `x0` using only function values.
pub fn powell<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &PowellOptions) -> (Vec<f64>, f64) {
    let n = x0.len();
    let identity = || -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let mut dirs = identity();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    for iter in 0..opts.max_iter {
        if iter % n == n - 1 {
            dirs = identity();
        }
        let start = x.clone();
        let f_start = fx;
        let mut biggest = (0usize, 0.0f64);
        for (k, d) in dirs.iter().enumerate() {
            let before = fx;
            let (t, v) = line_search(&mut f, &x, d, fx, opts.step);
            if v < fx {
                x = along(&x, d, t);
                fx = v;
            }
            if before - fx > biggest.1 {
                biggest = (k, before - fx);
            }
        }
        if 2.0 * (f_start - fx) <= opts.f_tol * (f_start.abs() + fx.abs()) + 1e-300 {
            break;
        }
        let new_dir: Vec<f64> = x.iter().zip(&start).map(|(a, b)| a - b).collect();
        let extrapolated: Vec<f64> = x.iter().zip(&start).map(|(a, b)| 2.0 * a - b).collect();
        let fe = f(&extrapolated);
        if fe < f_start {
            let t = 2.0 * (f_start - 2.0 * fx + fe) * (f_start - fx - biggest.1).powi(2)
                - biggest.1 * (f_start - fe).powi(2);
            if t < 0.0 {
                let (s, v) = line_search(&mut f, &x, &new_dir, fx, 1.0);
                if v < fx {
                    x = along(&x, &new_dir, s);
                    fx = v;
                }
                dirs[biggest.0] = dirs[n - 1].clone();
                dirs[n - 1] = new_dir;
            }
        }
    }
    (x, fx)
}
