//! Penalized log-likelihood assembled densely from raw observations.

use fmem::{build_roughness, GeneDataset, SmoothingParameters, VarianceComponents};
use nalgebra::{DMatrix, DVector};

use crate::minimize::{powell, PowellOptions};

pub struct DenseProblem {
    pub y: DVector<f64>,
    pub x_star: DMatrix<f64>,
    pub x_tilde: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub d_inv: DMatrix<f64>,
    pub sigma2: f64,
    pub sp: SmoothingParameters,
    pub n: usize,
    pub m: usize,
}

impl DenseProblem {
    pub fn new(data: &GeneDataset, vc: &VarianceComponents, sp: SmoothingParameters) -> Self {
        let pts = data.grid().points();
        let m = pts.len();
        let n = data.n_individuals();
        let n_obs = data.n_obs();
        let mut x_star = DMatrix::zeros(n_obs, 3 * m);
        let mut x_tilde = DMatrix::zeros(n_obs, n * m);
        let mut y = DVector::zeros(n_obs);
        let mut row = 0;
        for (i, ind) in data.individuals().iter().enumerate() {
            let sg = if ind.gender == fmem::Gender::Female { 1.0 } else { -1.0 };
            let sa = if ind.age_group == fmem::AgeGroup::Old { 1.0 } else { -1.0 };
            for (t, v) in ind.obs_times.iter().zip(&ind.values) {
                let k = pts
                    .iter()
                    .position(|p| (p - t).abs() < 1e-9)
                    .expect("time on grid");
                x_star[(row, k)] = 1.0;
                x_star[(row, m + k)] = sg;
                x_star[(row, 2 * m + k)] = sa;
                x_tilde[(row, i * m + k)] = 1.0;
                y[row] = *v;
                row += 1;
            }
        }
        Self {
            y,
            x_star,
            x_tilde,
            g: build_roughness(data.grid()).expect("grid").g,
            d_inv: vc.d.clone().try_inverse().expect("invertible D"),
            sigma2: vc.sigma2,
            sp,
            n,
            m,
        }
    }

    pub fn n_params(&self) -> usize {
        3 * self.m + self.n * self.m
    }

    /// Terms of the penalized criterion that depend on `(η, γ)`.
    pub fn objective(&self, eta: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
        let m = self.m;
        let r = &self.y - &self.x_star * eta - &self.x_tilde * gamma;
        let mut total = r.norm_squared() / self.sigma2;
        for i in 0..self.n {
            let gi = gamma.rows(i * m, m);
            total += (gi.transpose() * &self.d_inv * gi)[(0, 0)];
            total += self.sp.lambda_gamma * (gi.transpose() * &self.g * gi)[(0, 0)];
        }
        for b in 0..3 {
            let eb = eta.rows(b * m, m);
            total += self.sp.lambda * (eb.transpose() * &self.g * eb)[(0, 0)];
        }
        total
    }

    fn split(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let k = 3 * self.m;
        (
            DVector::from_column_slice(&x[..k]),
            DVector::from_column_slice(&x[k..]),
        )
    }

    /// Derivative-free minimization from the origin.
    pub fn minimize(&self) -> (DVector<f64>, DVector<f64>) {
        let x0 = vec![0.0; self.n_params()];
        let f = |x: &[f64]| {
            let (eta, gamma) = self.split(x);
            self.objective(&eta, &gamma)
        };
        let mut opts = PowellOptions::default();
        let (mut x, mut fx) = powell(f, &x0, &opts);
        // restart from the result until it stops improving
        opts.max_iter = 500;
        for _ in 0..10 {
            let (x2, f2) = powell(f, &x, &opts);
            let done = f2 >= fx - 1e-15 * fx.abs();
            x = x2;
            fx = f2;
            if done {
                break;
            }
        }
        self.split(&x)
    }
}
