//! Smoother matrices, degrees of freedom, information criteria, and the
//! simplex search over `(log₁₀ λ, log₁₀ λ_γ)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{FmemError, Result};
use crate::linalg::add_scaled_block;
use crate::estimation::{fit_em_design, initial_variance, EmOptions, ModelFit};
use crate::model::{AssembledModel, Design, GeneDataset, SmoothingParameters};
use crate::optim::{nelder_mead, NelderMeadOptions};

/// Dense smoother matrices; `N × N`, meant for inspection on small problems.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherMatrices {
    pub a_eta: DMatrix<f64>,
    pub a_gamma: DMatrix<f64>,
    pub df_fixed: f64,
    pub df_random: f64,
}

impl SmootherMatrices {
    pub fn df_total(&self) -> f64 {
        self.df_fixed + self.df_random + 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegreesOfFreedom {
    /// `tr(A_η)`
    pub fixed: f64,
    /// `tr(A_γ)`
    pub random: f64,
}

/// `A_η = X*(X*ᵀV⁻¹X* + λG*)⁻¹X*ᵀV⁻¹`, `A_γ = X̃D̃_γX̃ᵀV⁻¹(I − A_η)`.
pub fn smoother_matrices(model: &AssembledModel) -> Result<SmootherMatrices> {
    let ne = model.normal_equations()?;
    let n_obs = model.n_obs();
    let x_star = model.x_star();
    let x_tilde = model.x_tilde();
    let mut v_inv = DMatrix::zeros(n_obs, n_obs);
    let mut offset = 0;
    for i in 0..model.n_individuals() {
        let blk = model.v_block_inverse(i);
        let n = blk.nrows();
        v_inv.view_mut((offset, offset), (n, n)).copy_from(blk);
        offset += n;
    }
    let xt_vinv = x_star.transpose() * &v_inv;
    let a_eta = &x_star * ne.chol.solve(&xt_vinv);
    let d_tilde = crate::linalg::block_diagonal(model.d_gamma(), model.n_individuals());
    let resid_map = DMatrix::identity(n_obs, n_obs) - &a_eta;
    let a_gamma = &x_tilde * d_tilde * x_tilde.transpose() * &v_inv * resid_map;
    Ok(SmootherMatrices {
        df_fixed: a_eta.trace(),
        df_random: a_gamma.trace(),
        a_eta,
        a_gamma,
    })
}

/// Traces of the smoother matrices, computed block-wise.
///
/// `tr(A_η) = tr(H⁻¹C)` with `C = X*ᵀV⁻¹X*`, `H = C + λG*`, and
/// `tr(A_γ) = Σᵢ tr(D_γPᵢ) − tr(H⁻¹ Σᵢ X*ᵢᵀV_i⁻¹X_iD_γX_iᵀV_i⁻¹X*ᵢ)` with `Pᵢ = X_iᵀV_i⁻¹X_i`.
pub fn degrees_of_freedom(model: &AssembledModel) -> Result<DegreesOfFreedom> {
    let ne = model.normal_equations()?;
    let design = model.design();
    let m = design.m;
    let dg = model.d_gamma();
    let sandwich: Vec<DMatrix<f64>> = model
        .blocks()
        .iter()
        .map(|b| &b.proj * dg * &b.proj)
        .collect();
    let mut direct = 0.0;
    let mut q = DMatrix::zeros(3 * m, 3 * m);
    for ind in &design.individuals {
        let blk = &model.blocks()[ind.pattern];
        direct += (dg * &blk.proj).trace();
        let s = ind.signs();
        for a in 0..3 {
            for b in 0..3 {
                add_scaled_block(&mut q, a * m, b * m, s[a] * s[b], &sandwich[ind.pattern]);
            }
        }
    }
    let traces = penalized_traces(&ne.info, model.roughness(), model.sp().lambda, [&ne.info, &q])?;
    Ok(DegreesOfFreedom {
        fixed: traces[0],
        random: direct - traces[1],
    })
}

/// `tr(H⁻¹X)` for `H = C + λG*`, evaluated in the eigenbasis of `G` with the
/// two null directions per curve set exactly to zero and the penalized
/// directions rescaled by `(1 + λκ)^{-1/2}`, so that large `λ` stays accurate.
fn penalized_traces<const K: usize>(
    info: &DMatrix<f64>,
    g: &DMatrix<f64>,
    lambda: f64,
    mats: [&DMatrix<f64>; K],
) -> Result<[f64; K]> {
    let m = g.nrows();
    let eig = SymmetricEigen::new(g.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut kappa = vec![0.0; m];
    for &j in &order[2..] {
        kappa[j] = eig.eigenvalues[j].max(0.0);
    }
    let dim = 3 * m;
    let mut t = DMatrix::zeros(dim, dim);
    let mut pen = DVector::zeros(dim);
    for b in 0..3 {
        for j in 0..m {
            let d = lambda * kappa[j];
            let s = (1.0 + d).sqrt().recip();
            t.view_mut((b * m, b * m + j), (m, 1)).copy_from(&(eig.eigenvectors.column(j) * s));
            pen[b * m + j] = d * s * s;
        }
    }
    let mut h = t.transpose() * info * &t;
    for (k, p) in pen.iter().enumerate() {
        h[(k, k)] += p;
    }
    let chol = h.cholesky().ok_or(FmemError::RankDeficient)?;
    Ok(mats.map(|x| chol.solve(&(t.transpose() * x * &t)).trace()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    Aic,
    #[default]
    Bic,
}

impl Criterion {
    /// Per-degree-of-freedom penalty: 2 for AIC, `ln N` for BIC.
    pub fn penalty(self, n_obs: usize) -> f64 {
        match self {
            Criterion::Aic => 2.0,
            Criterion::Bic => (n_obs as f64).ln(),
        }
    }

    /// `−2 lik + penalty · df`.
    pub fn evaluate(self, loglik: f64, df: f64, n_obs: usize) -> f64 {
        -2.0 * loglik + self.penalty(n_obs) * df
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "AIC",
            Criterion::Bic => "BIC",
        })
    }
}

impl FromStr for Criterion {
    type Err = FmemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AIC" => Ok(Criterion::Aic),
            "BIC" => Ok(Criterion::Bic),
            other => Err(FmemError::InvalidInput(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Information criterion of a fit, using `df_total` and the marginal log-likelihood.
pub fn score(fit: &ModelFit, kind: Criterion) -> f64 {
    kind.evaluate(fit.loglik, fit.df_total(), fit.n_obs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    /// Simplex iterations.
    pub budget: usize,
    /// Box bounds on both `log₁₀ λ` and `log₁₀ λ_γ`.
    pub log10_bounds: (f64, f64),
    pub start: [f64; 2],
    pub step: f64,
    pub em: EmOptions,
    /// Reuse the previous evaluation's variance components as the EM start.
    pub warm_start: bool,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            budget: 100,
            log10_bounds: (-8.0, 12.0),
            start: [0.0, 0.0],
            step: 1.0,
            em: EmOptions::default(),
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub sp: SmoothingParameters,
    /// Criterion value; `+∞` when the fit failed.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub best_sp: SmoothingParameters,
    pub criterion_value: f64,
    pub criterion_kind: Criterion,
    pub trace: Vec<Evaluation>,
    pub iterations: usize,
}

pub fn select(data: &GeneDataset, kind: Criterion, opts: &SelectionOptions) -> Result<SelectionResult> {
    let design = Arc::new(Design::new(data)?);
    let (lo, hi) = opts.log10_bounds;
    let mut warm = initial_variance(data);
    let mut trace = Vec::new();
    let mut first_error: Option<FmemError> = None;

    let objective = |x: &[f64]| -> f64 {
        let sp = match SmoothingParameters::from_log10(x[0], x[1]) {
            Ok(sp) => sp,
            Err(e) => {
                first_error.get_or_insert(e);
                return f64::INFINITY;
            }
        };
        let init = if opts.warm_start {
            warm.clone()
        } else {
            initial_variance(data)
        };
        let value = match fit_em_design(Arc::clone(&design), data.gene_id(), sp, init, &opts.em) {
            Ok(fit) => {
                let v = score(&fit, kind);
                if opts.warm_start {
                    warm = fit.vc;
                }
                if v.is_finite() {
                    v
                } else {
                    f64::INFINITY
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
                f64::INFINITY
            }
        };
        trace.push(Evaluation { sp, value });
        value
    };

    let nm = nelder_mead(
        objective,
        &opts.start,
        opts.step,
        &[lo, lo],
        &[hi, hi],
        &NelderMeadOptions {
            max_iter: opts.budget,
            restart: true,
            ..NelderMeadOptions::default()
        },
    );

    let best = trace
        .iter()
        .copied()
        .filter(|e| e.value.is_finite())
        .fold(None::<Evaluation>, |acc, e| match acc {
            Some(b) if b.value <= e.value => Some(b),
            _ => Some(e),
        });
    match best {
        Some(b) => Ok(SelectionResult {
            best_sp: b.sp,
            criterion_value: b.value,
            criterion_kind: kind,
            trace,
            iterations: nm.iterations,
        }),
        None => Err(FmemError::SelectionFailed(Box::new(
            first_error.unwrap_or(FmemError::InvalidInput("no evaluations".into())),
        ))),
    }
}

/// Selection followed by a fresh EM fit (standard initialization) at the chosen pair.
pub fn select_and_fit(
    data: &GeneDataset,
    kind: Criterion,
    opts: &SelectionOptions,
) -> Result<(SelectionResult, ModelFit)> {
    let sel = select(data, kind, opts)?;
    let em = EmOptions {
        init: None,
        ..opts.em.clone()
    };
    let fit = crate::estimation::fit_em(data, sel.best_sp, &em)?;
    Ok((sel, fit))
}

/// Marginal fitted values `X*η̂ + X̃γ̂` for a model and its estimates.
pub fn fitted_values(model: &AssembledModel, eta: &DVector<f64>, gamma: &DVector<f64>) -> DVector<f64> {
    model.fixed_fitted(eta) + model.random_fitted(gamma)
}
