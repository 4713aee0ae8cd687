//! Penalized BLUE/BLUP of the effect curves and EM estimation of `(D, σ²)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{FmemError, Result};
use crate::linalg::symmetrize;
use crate::model::{AssembledModel, Design, GeneDataset, SmoothingParameters, VarianceComponents};
use crate::selection::degrees_of_freedom;
use crate::spline::TimeGrid;

/// Lower bound applied to the noise-variance update.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Fixed-effect vector `η = [μ, α, β]` and stacked random curves `γ = [γ₁, …, γ_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Effects {
    pub eta: DVector<f64>,
    pub gamma: DVector<f64>,
    m: usize,
}

impl Effects {
    pub fn mu(&self) -> DVector<f64> {
        self.eta.rows(0, self.m).into_owned()
    }

    pub fn alpha(&self) -> DVector<f64> {
        self.eta.rows(self.m, self.m).into_owned()
    }

    pub fn beta(&self) -> DVector<f64> {
        self.eta.rows(2 * self.m, self.m).into_owned()
    }

    pub fn gamma_of(&self, individual: usize) -> DVector<f64> {
        self.gamma.rows(individual * self.m, self.m).into_owned()
    }

    /// Random curves as an `n × M` matrix, one row per individual.
    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        let n = self.gamma.len() / self.m;
        DMatrix::from_fn(n, self.m, |i, k| self.gamma[i * self.m + k])
    }
}

/// `η̂ = (X*ᵀV⁻¹X* + λG*)⁻¹X*ᵀV⁻¹y` and `γ̂ = D̃_γX̃ᵀV⁻¹(y − X*η̂)`, using the
/// model's smoothing parameters.
pub fn blue_blup(model: &AssembledModel) -> Result<Effects> {
    let ne = model.normal_equations()?;
    let eta = ne.chol.solve(&ne.rhs);
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(FmemError::RankDeficient);
    }
    let gamma = predict_random(model, &eta);
    Ok(Effects {
        eta,
        gamma,
        m: model.m(),
    })
}

/// `γ̂_i = D_γ X_iᵀ V_i⁻¹ (y_i − X*_i η)` for every individual.
pub fn predict_random(model: &AssembledModel, eta: &DVector<f64>) -> DVector<f64> {
    let design = model.design();
    let m = design.m;
    let mut gamma = DVector::zeros(design.individuals.len() * m);
    for (i, ind) in design.individuals.iter().enumerate() {
        let r = &ind.y - ind.gather(&ind.fixed_curve(eta, m));
        let g = &model.block(i).gain * r;
        gamma.rows_mut(i * m, m).copy_from(&g);
    }
    gamma
}

/// Conditional expectations of the sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    /// `E[γ_i γ_iᵀ | y]`, one per individual.
    pub egg: Vec<DMatrix<f64>>,
    /// `E[εᵀε | y]`.
    pub eee: f64,
}

pub fn e_step(model: &AssembledModel, eta: &DVector<f64>) -> Result<EStep> {
    let design = model.design();
    let m = design.m;
    if eta.len() != 3 * m {
        return Err(FmemError::Dimension(format!(
            "eta has length {}, expected {}",
            eta.len(),
            3 * m
        )));
    }
    let sigma2 = model.vc().sigma2;
    let mut egg = Vec::with_capacity(design.individuals.len());
    let mut eee = 0.0;
    for (i, ind) in design.individuals.iter().enumerate() {
        let blk = model.block(i);
        let r = &ind.y - ind.gather(&ind.fixed_curve(eta, m));
        let g = &blk.gain * &r;
        let eps = &r - ind.gather(&g);
        egg.push(&g * g.transpose() + &blk.cond_cov);
        eee += eps.norm_squared() + sigma2 * (r.len() as f64 - sigma2 * blk.v_inv_trace);
    }
    Ok(EStep { egg, eee })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub vc: VarianceComponents,
    /// Set when `σ̂²` fell below [`SIGMA2_FLOOR`] and was clamped.
    pub sigma2_floored: bool,
}

/// `D̂ = (1/n) Σ E[γ_iγ_iᵀ]`, `σ̂² = E[εᵀε] / N`.
pub fn m_step(egg: &[DMatrix<f64>], eee: f64, n: usize, n_obs: usize) -> Result<MStep> {
    if egg.len() != n || n == 0 || n_obs == 0 {
        return Err(FmemError::Dimension(format!(
            "{} conditional second moments for {n} individuals",
            egg.len()
        )));
    }
    let mut d = egg[1..].iter().fold(egg[0].clone(), |acc, e| acc + e) / n as f64;
    symmetrize(&mut d);
    let raw = eee / n_obs as f64;
    if !raw.is_finite() || d.iter().any(|v| !v.is_finite()) {
        return Err(FmemError::NonFinite("EM update"));
    }
    let sigma2_floored = raw < SIGMA2_FLOOR;
    let vc = VarianceComponents::new(d, raw.max(SIGMA2_FLOOR))?;
    Ok(MStep { vc, sigma2_floored })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    /// Relative tolerance on the largest change in `(σ², vec D)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting variance components; `None` uses [`initial_variance`].
    pub init: Option<VarianceComponents>,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            init: None,
        }
    }
}

/// Data-driven starting values: `σ²` from within-individual first differences
/// (halved) and `D = s²I` with `s²` the variance of individual means.
pub fn initial_variance(data: &GeneDataset) -> VarianceComponents {
    let diffs: Vec<f64> = data
        .individuals()
        .iter()
        .flat_map(|ind| ind.values.windows(2).map(|w| w[1] - w[0]))
        .collect();
    let mut sigma2 = sample_variance(&diffs) / 2.0;
    if !(sigma2 > 0.0) {
        let y: Vec<f64> = data.response().iter().copied().collect();
        sigma2 = sample_variance(&y) / 2.0;
    }
    if !(sigma2 > 0.0) {
        sigma2 = 1e-6;
    }
    let means: Vec<f64> = data
        .individuals()
        .iter()
        .map(|ind| ind.values.iter().sum::<f64>() / ind.len() as f64)
        .collect();
    let mut s2 = sample_variance(&means);
    if !(s2 > 0.0) {
        s2 = sigma2;
    }
    let m = data.grid().len();
    VarianceComponents {
        d: DMatrix::identity(m, m) * s2,
        sigma2,
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Largest absolute change in `(σ², vec D)` relative to the largest old magnitude.
pub fn relative_change(old: &VarianceComponents, new: &VarianceComponents) -> f64 {
    let scale = old.params().fold(0.0f64, |a, v| a.max(v.abs()));
    let delta = old
        .params()
        .zip(new.params())
        .fold(0.0f64, |a, (o, n)| a.max((o - n).abs()));
    delta / scale.max(f64::MIN_POSITIVE)
}

/// Estimated model for one gene at fixed smoothing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub gene_id: String,
    pub grid: TimeGrid,
    pub mu: DVector<f64>,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    /// `n × M`, one row per individual.
    pub gamma: DMatrix<f64>,
    pub vc: VarianceComponents,
    pub sp: SmoothingParameters,
    pub df_fixed: f64,
    pub df_random: f64,
    /// Marginal Gaussian log-likelihood of `y` under `N(X*η̂, V)`.
    pub loglik: f64,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub em_iterations: usize,
    pub converged: bool,
    pub ridged: bool,
    pub sigma2_floored: bool,
    /// Marginal log-likelihood at the start of every EM iteration.
    pub loglik_trace: Vec<f64>,
}

impl ModelFit {
    pub fn n_obs(&self) -> usize {
        self.fitted.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.gamma.nrows()
    }

    /// `df = tr(A_η + A_γ) + 1`.
    pub fn df_total(&self) -> f64 {
        self.df_fixed + self.df_random + 1.0
    }

    pub fn eta(&self) -> DVector<f64> {
        let m = self.mu.len();
        let mut eta = DVector::zeros(3 * m);
        eta.rows_mut(0, m).copy_from(&self.mu);
        eta.rows_mut(m, m).copy_from(&self.alpha);
        eta.rows_mut(2 * m, m).copy_from(&self.beta);
        eta
    }

    /// Residuals divided by `σ̂`.
    pub fn standardized_residuals(&self) -> DVector<f64> {
        &self.residuals / self.vc.sigma2.sqrt()
    }
}

/// Runs EM from the configured starting point until the variance components settle.
pub fn fit_em(data: &GeneDataset, sp: SmoothingParameters, opts: &EmOptions) -> Result<ModelFit> {
    let design = Arc::new(Design::new(data)?);
    let init = match &opts.init {
        Some(vc) => vc.clone(),
        None => initial_variance(data),
    };
    fit_em_design(design, data.gene_id(), sp, init, opts)
}

pub(crate) fn fit_em_design(
    design: Arc<Design>,
    gene_id: &str,
    sp: SmoothingParameters,
    init: VarianceComponents,
    opts: &EmOptions,
) -> Result<ModelFit> {
    let n = design.individuals.len();
    let n_obs = design.n_obs;
    let mut vc = init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut floored = false;
    let mut best: Option<(f64, VarianceComponents)> = None;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let model = AssembledModel::from_design(Arc::clone(&design), vc.clone(), sp)?;
        let effects = blue_blup(&model)?;
        let ll = model.marginal_loglik(&effects.eta);
        trace.push(ll);
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, vc.clone()));
        }
        let estep = e_step(&model, &effects.eta)?;
        let update = m_step(&estep.egg, estep.eee, n, n_obs)?;
        floored = update.sigma2_floored;
        let change = relative_change(&vc, &update.vc);
        vc = update.vc;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        if let Some((_, b)) = best {
            vc = b;
        }
    }

    let model = AssembledModel::from_design(Arc::clone(&design), vc, sp)?;
    let effects = blue_blup(&model)?;
    let loglik = model.marginal_loglik(&effects.eta);
    let df = degrees_of_freedom(&model)?;
    let y = model.y();
    let fitted = model.fixed_fitted(&effects.eta) + model.random_fitted(&effects.gamma);
    let residuals = &y - &fitted;
    Ok(ModelFit {
        gene_id: gene_id.to_string(),
        grid: design.grid.clone(),
        mu: effects.mu(),
        alpha: effects.alpha(),
        beta: effects.beta(),
        gamma: effects.gamma_matrix(),
        vc: model.vc().clone(),
        sp,
        df_fixed: df.fixed,
        df_random: df.random,
        loglik,
        fitted,
        residuals,
        em_iterations: iterations,
        converged,
        ridged: model.ridged(),
        sigma2_floored: floored,
        loglik_trace: trace,
    })
}
