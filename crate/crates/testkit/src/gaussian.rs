//! Dense Gaussian conditioning and sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Conditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Distribution of `z ~ N(0, prior)` given `A z = r`.
pub fn condition_on_linear(prior: &DMatrix<f64>, a: &DMatrix<f64>, r: &DVector<f64>) -> Conditional {
    let cross = prior * a.transpose();
    let s = a * &cross;
    let lu = s.lu();
    let gain = lu.solve(&cross.transpose()).expect("nonsingular").transpose();
    let mean = &gain * r;
    let mut cov = prior - &gain * cross.transpose();
    cov = (&cov + cov.transpose()) * 0.5;
    Conditional { mean, cov }
}

/// `R` with `R Rᵀ = cov`, clipping tiny negative eigenvalues.
pub fn psd_root(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

pub struct Sampler {
    mean: DVector<f64>,
    root: DMatrix<f64>,
}

impl Sampler {
    pub fn new(dist: &Conditional) -> Self {
        Self {
            mean: dist.mean.clone(),
            root: psd_root(&dist.cov),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.root * z
    }
}

/// Monte Carlo estimates of `E[γᵢγᵢᵀ | y]` and `E[εᵀε | y]` with standard errors.
pub struct MonteCarloEStep {
    pub egg: Vec<DMatrix<f64>>,
    pub egg_se: Vec<DMatrix<f64>>,
    pub eee: f64,
    pub eee_se: f64,
}

/// Samples `(γ, ε)` given `r = y − X*η = X̃γ + ε` under `γᵢ ~ N(0, D_γ)`, `ε ~ N(0, σ²I)`.
pub fn monte_carlo_e_step<R: Rng>(
    problem: &crate::objective::DenseProblem,
    eta: &DVector<f64>,
    draws: usize,
    rng: &mut R,
) -> MonteCarloEStep {
    let (n, m) = (problem.n, problem.m);
    let n_obs = problem.y.len();
    let d_gamma = (&problem.d_inv + &problem.g * problem.sp.lambda_gamma)
        .try_inverse()
        .expect("invertible");
    let dim = n * m + n_obs;
    let mut prior = DMatrix::zeros(dim, dim);
    for i in 0..n {
        prior.view_mut((i * m, i * m), (m, m)).copy_from(&d_gamma);
    }
    for k in 0..n_obs {
        prior[(n * m + k, n * m + k)] = problem.sigma2;
    }
    let mut a = DMatrix::zeros(n_obs, dim);
    a.view_mut((0, 0), (n_obs, n * m)).copy_from(&problem.x_tilde);
    a.view_mut((0, n * m), (n_obs, n_obs)).fill_with_identity();
    let r = &problem.y - &problem.x_star * eta;
    let sampler = Sampler::new(&condition_on_linear(&prior, &a, &r));

    let mut sum = vec![DMatrix::zeros(m, m); n];
    let mut sum_sq = vec![DMatrix::zeros(m, m); n];
    let (mut e_sum, mut e_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let z = sampler.sample(rng);
        for i in 0..n {
            let g = z.rows(i * m, m);
            for p in 0..m {
                for q in 0..m {
                    let v = g[p] * g[q];
                    sum[i][(p, q)] += v;
                    sum_sq[i][(p, q)] += v * v;
                }
            }
        }
        let e = z.rows(n * m, n_obs).norm_squared();
        e_sum += e;
        e_sq += e * e;
    }
    let k = draws as f64;
    let se = |s: f64, s2: f64| ((s2 / k - (s / k).powi(2)).max(0.0) * k / (k - 1.0) / k).sqrt();
    MonteCarloEStep {
        egg: sum.iter().map(|s| s / k).collect(),
        egg_se: sum
            .iter()
            .zip(&sum_sq)
            .map(|(s, s2)| s.zip_map(s2, |a, b| se(a, b)))
            .collect(),
        eee: e_sum / k,
        eee_se: se(e_sum, e_sq),
    }
}
