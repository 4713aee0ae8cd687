//! Brute-force statistics.

/// BH q-values by direct evaluation of `min_{k: p_(k) ≥ p_j} m p_(k) / rank(k)`, O(m²).
pub fn bh_brute_force(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    p.iter()
        .map(|&pj| {
            let first = sorted.iter().position(|&s| s == pj).expect("present");
            (first..m)
                .map(|k| sorted[k] * (m as f64 / (k + 1) as f64))
                .fold(f64::INFINITY, f64::min)
                .min(1.0)
        })
        .collect()
}

/// Kolmogorov–Smirnov distance from Uniform(0, 1).
pub fn ks_uniform_statistic(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let above = (i + 1) as f64 / n - x;
        let below = x - i as f64 / n;
        d.max(above).max(below)
    })
}

/// Asymptotic `P(D_n > d)` with the small-sample correction of the argument.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let x = d * (sn + 0.12 + 0.11 / sn);
    if x < 0.2 {
        return 1.0;
    }
    let mut total = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        total += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * total).clamp(0.0, 1.0)
}

/// Smallest `k` with `P(Binomial(n, p) ≤ k) ≥ level`.
pub fn binomial_upper(n: usize, p: f64, level: f64) -> usize {
    let mut cdf = 0.0;
    let mut log_choose = 0.0f64;
    for k in 0..=n {
        if k > 0 {
            log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        cdf += (log_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp();
        if cdf >= level {
            return k;
        }
    }
    n
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n − 1`.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
