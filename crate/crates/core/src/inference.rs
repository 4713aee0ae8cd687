//! Confidence bands for the fixed-effect curves and permutation tests with
//! pooled nulls and Benjamini–Hochberg q-values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{FmemError, Result};
use crate::estimation::{fit_em, EmOptions, ModelFit};
use crate::model::{AssembledModel, GeneDataset, IndividualSeries, SmoothingParameters, VarianceComponents};
use crate::seed::rng_for;
use crate::selection::{select, Criterion, SelectionOptions};
use crate::spline::{l2_norm, NaturalCubicSpline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curve {
    Mu,
    Alpha,
    Beta,
}

impl Curve {
    pub const ALL: [Curve; 3] = [Curve::Mu, Curve::Alpha, Curve::Beta];

    fn block(self) -> usize {
        match self {
            Curve::Mu => 0,
            Curve::Alpha => 1,
            Curve::Beta => 2,
        }
    }
}

impl fmt::Display for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Curve::Mu => "mu",
            Curve::Alpha => "alpha",
            Curve::Beta => "beta",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BandMethod {
    #[default]
    Theoretical,
    Bootstrap,
}

impl fmt::Display for BandMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandMethod::Theoretical => "theoretical",
            BandMethod::Bootstrap => "bootstrap",
        })
    }
}

impl FromStr for BandMethod {
    type Err = FmemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theoretical" => Ok(BandMethod::Theoretical),
            "bootstrap" => Ok(BandMethod::Bootstrap),
            other => Err(FmemError::InvalidInput(format!("unknown band method {other:?}"))),
        }
    }
}

/// Pointwise band at the design points.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBand {
    pub curve: Curve,
    pub level: f64,
    pub estimate: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub method: BandMethod,
}

impl ConfidenceBand {
    pub fn half_widths(&self) -> DVector<f64> {
        (&self.upper - &self.lower) / 2.0
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(FmemError::InvalidInput(format!("confidence level {level} outside (0, 1)")))
    }
}

/// Two-sided critical value `z` with `Φ(z) = 1 − (1 − level)/2`.
pub fn critical_value(level: f64) -> Result<f64> {
    check_level(level)?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// Bands from `cov(η̂) = H⁻¹(X*ᵀV⁻¹X*)H⁻¹` with `H = X*ᵀV⁻¹X* + λG*`.
pub fn theoretical_bands(model: &AssembledModel, level: f64) -> Result<[ConfidenceBand; 3]> {
    let z = critical_value(level)?;
    let ne = model.normal_equations()?;
    let eta = ne.chol.solve(&ne.rhs);
    let h_inv = ne.chol.inverse();
    let cov = &h_inv * &ne.info * &h_inv;
    let m = model.m();
    Ok(Curve::ALL.map(|curve| {
        let off = curve.block() * m;
        let estimate = eta.rows(off, m).into_owned();
        let half = DVector::from_fn(m, |k, _| z * cov[(off + k, off + k)].max(0.0).sqrt());
        ConfidenceBand {
            curve,
            level,
            lower: &estimate - &half,
            upper: &estimate + &half,
            estimate,
            method: BandMethod::Theoretical,
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub em: EmOptions,
    /// Refit failures tolerated, as a fraction of `replicates`.
    pub max_failure_fraction: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: 200,
            level: 0.95,
            seed: 0,
            em: EmOptions::default(),
            max_failure_fraction: 0.05,
        }
    }
}

/// One bootstrap data set: every individual slot keeps its labels and
/// observation times, draws a fitted random curve and residuals with replacement.
pub fn bootstrap_sample<R: Rng>(fit: &ModelFit, data: &GeneDataset, rng: &mut R) -> Result<GeneDataset> {
    let n = fit.n_individuals();
    let pool = fit.residuals.as_slice();
    let mut values = Vec::with_capacity(data.n_obs());
    for ind in data.individuals() {
        let donor = rng.gen_range(0..n);
        for &t in &ind.obs_times {
            let k = data.grid().snap(t)?;
            let fixed = fit.mu[k] + ind.gender.sign() * fit.alpha[k] + ind.age_group.sign() * fit.beta[k];
            let eps = pool[rng.gen_range(0..pool.len())];
            values.push(fixed + fit.gamma[(donor, k)] + eps);
        }
    }
    data.with_values(&values)
}

/// Percentile bands from refits of resampled data at the fit's smoothing parameters.
pub fn bootstrap_bands(fit: &ModelFit, data: &GeneDataset, opts: &BootstrapOptions) -> Result<[ConfidenceBand; 3]> {
    check_level(opts.level)?;
    if opts.replicates < 100 {
        return Err(FmemError::InvalidInput(format!(
            "bootstrap needs at least 100 replicates, got {}",
            opts.replicates
        )));
    }
    let em = EmOptions {
        init: Some(fit.vc.clone()),
        ..opts.em.clone()
    };
    let draws: Vec<Option<DVector<f64>>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(opts.seed, data.gene_id(), b as u64);
            let sample = bootstrap_sample(fit, data, &mut rng).ok()?;
            fit_em(&sample, fit.sp, &em).ok().map(|f| f.eta())
        })
        .collect();
    let etas: Vec<DVector<f64>> = draws.into_iter().flatten().collect();
    let failed = opts.replicates - etas.len();
    if failed as f64 > opts.max_failure_fraction * opts.replicates as f64 {
        return Err(FmemError::BootstrapFailures {
            failed,
            total: opts.replicates,
        });
    }
    let m = fit.mu.len();
    let point = fit.eta();
    let lo_q = (1.0 - opts.level) / 2.0;
    let hi_q = 1.0 - lo_q;
    Ok(Curve::ALL.map(|curve| {
        let off = curve.block() * m;
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        for k in 0..m {
            let mut xs: Vec<f64> = etas.iter().map(|e| e[off + k]).collect();
            xs.sort_by(f64::total_cmp);
            // the band always covers the point estimate
            lower[k] = quantile_sorted(&xs, lo_q).min(point[off + k]);
            upper[k] = quantile_sorted(&xs, hi_q).max(point[off + k]);
        }
        ConfidenceBand {
            curve,
            level: opts.level,
            estimate: point.rows(off, m).into_owned(),
            lower,
            upper,
            method: BandMethod::Bootstrap,
        }
    }))
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Gender,
    Age,
    Temporal,
}

impl Effect {
    pub const ALL: [Effect; 3] = [Effect::Gender, Effect::Age, Effect::Temporal];

    fn stream(self) -> u64 {
        match self {
            Effect::Gender => 1,
            Effect::Age => 2,
            Effect::Temporal => 3,
        }
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Effect::Gender => "gender",
            Effect::Age => "age",
            Effect::Temporal => "temporal",
        })
    }
}

impl FromStr for Effect {
    type Err = FmemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Effect::Gender),
            "age" => Ok(Effect::Age),
            "temporal" => Ok(Effect::Temporal),
            other => Err(FmemError::InvalidInput(format!("unknown effect {other:?}"))),
        }
    }
}

/// `‖α̂‖₂` (gender), `‖β̂‖₂` (age) or `‖μ̂′‖₂` (temporal) over the grid span.
pub fn effect_statistic(fit: &ModelFit, effect: Effect) -> f64 {
    let (values, order) = match effect {
        Effect::Gender => (&fit.alpha, 0),
        Effect::Age => (&fit.beta, 0),
        Effect::Temporal => (&fit.mu, 1),
    };
    NaturalCubicSpline::new(&fit.grid, values.as_slice())
        .map(|s| l2_norm(&s, order))
        .unwrap_or(f64::NEG_INFINITY)
}

/// Random relabeling under the null of `effect`.
///
/// Gender and age draws shuffle that label across individuals (counts are
/// preserved) and reject draws that reproduce the observed assignment when a
/// different one exists. Temporal draws apply one non-identity permutation of
/// the design points to every individual's observation times.
pub fn permute<R: Rng>(data: &GeneDataset, effect: Effect, rng: &mut R) -> Result<GeneDataset> {
    permute_with(data, effect, TemporalScheme::Global, rng)
}

/// How temporal null draws permute the design points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalScheme {
    /// One permutation shared by all individuals.
    #[default]
    Global,
    /// An independent permutation per individual.
    PerIndividual,
}

fn non_identity_permutation<R: Rng>(m: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..m).collect();
    for _ in 0..1000 {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    perm
}

pub fn permute_with<R: Rng>(
    data: &GeneDataset,
    effect: Effect,
    scheme: TemporalScheme,
    rng: &mut R,
) -> Result<GeneDataset> {
    const MAX_REDRAWS: usize = 1000;
    match effect {
        Effect::Gender | Effect::Age => {
            let labels: Vec<_> = data
                .individuals()
                .iter()
                .map(|i| (i.gender, i.age_group))
                .collect();
            let original: Vec<bool> = labels
                .iter()
                .map(|&(g, a)| match effect {
                    Effect::Gender => g == crate::model::Gender::Female,
                    _ => a == crate::model::AgeGroup::Old,
                })
                .collect();
            let varied = original.iter().any(|&b| b != original[0]);
            let mut shuffled = original.clone();
            for _ in 0..MAX_REDRAWS {
                shuffled.shuffle(rng);
                if !varied || shuffled != original {
                    break;
                }
            }
            let new_labels: Vec<_> = labels
                .iter()
                .zip(&shuffled)
                .map(|(&(g, a), &flag)| match effect {
                    Effect::Gender => (
                        if flag {
                            crate::model::Gender::Female
                        } else {
                            crate::model::Gender::Male
                        },
                        a,
                    ),
                    _ => (
                        g,
                        if flag {
                            crate::model::AgeGroup::Old
                        } else {
                            crate::model::AgeGroup::Young
                        },
                    ),
                })
                .collect();
            data.relabeled(&new_labels)
        }
        Effect::Temporal => {
            let pts = data.grid().points();
            let m = pts.len();
            let shared = non_identity_permutation(m, rng);
            let individuals = data
                .individuals()
                .iter()
                .map(|ind| {
                    let perm = match scheme {
                        TemporalScheme::Global => shared.clone(),
                        TemporalScheme::PerIndividual => non_identity_permutation(m, rng),
                    };
                    let times = ind
                        .obs_times
                        .iter()
                        .map(|&t| data.grid().snap(t).map(|k| pts[perm[k]]))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(IndividualSeries {
                        obs_times: times,
                        ..ind.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            data.with_individuals(individuals)
        }
    }
}

/// How smoothing parameters are chosen for permuted refits.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum SpPolicy {
    /// Keep the pair selected on the observed data.
    #[default]
    ReuseObserved,
    /// Run the full selection on every permuted data set.
    Reselect {
        criterion: Criterion,
        options: SelectionOptions,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullConfig {
    pub permutations_per_gene: usize,
    pub seed: u64,
    pub sp_policy: SpPolicy,
    pub temporal_scheme: TemporalScheme,
    pub em: EmOptions,
    /// Fraction of failed refits above which pool construction errors.
    pub max_failure_fraction: f64,
}

impl Default for NullConfig {
    fn default() -> Self {
        Self {
            permutations_per_gene: 32,
            seed: 0,
            sp_policy: SpPolicy::ReuseObserved,
            temporal_scheme: TemporalScheme::Global,
            em: EmOptions::default(),
            max_failure_fraction: 0.10,
        }
    }
}

/// One gene's contribution to a null pool.
#[derive(Debug, Clone, Copy)]
pub struct NullInput<'a> {
    pub data: &'a GeneDataset,
    pub sp: SmoothingParameters,
    /// Optional EM starting point (usually the observed fit's estimates).
    pub vc: Option<&'a VarianceComponents>,
}

/// Permutation statistics pooled across genes.
#[derive(Debug, Clone, PartialEq)]
pub struct NullPool {
    pub effect: Effect,
    /// All successful permutation statistics, sorted ascending.
    pub statistics: Vec<f64>,
    /// The same statistics grouped by gene.
    pub per_gene: BTreeMap<String, Vec<f64>>,
    pub permutations_per_gene: usize,
    pub seed: u64,
    pub failures: usize,
    pub attempted: usize,
}

impl NullPool {
    pub fn len(&self) -> usize {
        self.statistics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statistics.is_empty()
    }
}

fn permuted_statistic(input: &NullInput<'_>, effect: Effect, cfg: &NullConfig, draw: usize) -> Result<f64> {
    let mut rng = rng_for(cfg.seed, input.data.gene_id(), effect.stream() << 32 | draw as u64);
    let permuted = permute_with(input.data, effect, cfg.temporal_scheme, &mut rng)?;
    let em = EmOptions {
        init: input.vc.cloned(),
        ..cfg.em.clone()
    };
    let sp = match &cfg.sp_policy {
        SpPolicy::ReuseObserved => input.sp,
        SpPolicy::Reselect { criterion, options } => select(&permuted, *criterion, options)?.best_sp,
    };
    let fit = fit_em(&permuted, sp, &em)?;
    let stat = effect_statistic(&fit, effect);
    if stat.is_finite() {
        Ok(stat)
    } else {
        Err(FmemError::NonFinite("permutation statistic"))
    }
}

/// Refits every gene under `permutations_per_gene` random relabelings.
pub fn build_null_pool(inputs: &[NullInput<'_>], effect: Effect, cfg: &NullConfig) -> Result<NullPool> {
    if inputs.is_empty() {
        return Err(FmemError::InvalidInput("null pool needs at least one gene".into()));
    }
    let perms = cfg.permutations_per_gene;
    let results: Vec<Result<f64>> = (0..inputs.len() * perms)
        .into_par_iter()
        .map(|job| permuted_statistic(&inputs[job / perms], effect, cfg, job % perms))
        .collect();
    let attempted = results.len();
    let mut per_gene: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut statistics = Vec::with_capacity(attempted);
    let mut failures = 0;
    let mut first_failure = None;
    for (job, res) in results.into_iter().enumerate() {
        let gene = inputs[job / perms].data.gene_id();
        match res {
            Ok(s) => {
                statistics.push(s);
                per_gene.entry(gene.to_string()).or_default().push(s);
            }
            Err(e) => {
                failures += 1;
                first_failure.get_or_insert(e);
            }
        }
    }
    if let Some(FmemError::Inestimable(f)) = first_failure {
        return Err(FmemError::Inestimable(f));
    }
    if failures as f64 > cfg.max_failure_fraction * attempted as f64 {
        return Err(FmemError::PermutationFailures {
            failed: failures,
            total: attempted,
        });
    }
    statistics.sort_by(f64::total_cmp);
    for v in per_gene.values_mut() {
        v.sort_by(f64::total_cmp);
    }
    Ok(NullPool {
        effect,
        statistics,
        per_gene,
        permutations_per_gene: perms,
        seed: cfg.seed,
        failures,
        attempted,
    })
}

/// `(1 + #{null ≥ observed}) / (1 + K)` against sorted null statistics.
/// Non-finite observed statistics (failed fits) get `p = 1`.
pub fn empirical_pvalue(observed: f64, sorted_null: &[f64]) -> f64 {
    if !observed.is_finite() {
        return 1.0;
    }
    let k = sorted_null.len();
    let below = sorted_null.partition_point(|&s| s < observed);
    (1 + k - below) as f64 / (1 + k) as f64
}

pub fn empirical_pvalues(observed: &[f64], pool: &NullPool) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(FmemError::EmptyPool);
    }
    Ok(observed
        .iter()
        .map(|&o| empirical_pvalue(o, &pool.statistics))
        .collect())
}

/// Which null a gene's statistic is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NullScope {
    #[default]
    Pooled,
    PerGene,
}

/// p-values for `(gene_id, statistic)` pairs under the chosen scope.
pub fn scoped_pvalues(observed: &[(&str, f64)], pool: &NullPool, scope: NullScope) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(FmemError::EmptyPool);
    }
    observed
        .iter()
        .map(|&(gene, stat)| match scope {
            NullScope::Pooled => Ok(empirical_pvalue(stat, &pool.statistics)),
            NullScope::PerGene => match pool.per_gene.get(gene) {
                Some(null) if !null.is_empty() => Ok(empirical_pvalue(stat, null)),
                _ => Ok(1.0),
            },
        })
        .collect()
}

/// Benjamini–Hochberg step-up q-values.
pub fn bh_fdr(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut q = vec![0.0; m];
    let mut running = f64::INFINITY;
    for (rank, &idx) in order.iter().enumerate().rev() {
        let candidate = (p_values[idx] * (m as f64 / (rank + 1) as f64)).min(1.0);
        running = running.min(candidate);
        q[idx] = running;
    }
    q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub gene_id: String,
    pub effect: Effect,
    pub statistic: f64,
    pub p_value: f64,
    pub q_value: f64,
    /// Set when the observed fit failed and the p-value is the conventional 1.
    pub flagged: bool,
}

/// p-values and q-values for one effect across a gene set.
pub fn test_effect(observed: &[(&str, f64)], pool: &NullPool, scope: NullScope) -> Result<Vec<TestResult>> {
    let p = scoped_pvalues(observed, pool, scope)?;
    let q = bh_fdr(&p);
    Ok(observed
        .iter()
        .zip(p.iter().zip(&q))
        .map(|(&(gene, stat), (&p_value, &q_value))| TestResult {
            gene_id: gene.to_string(),
            effect: pool.effect,
            statistic: stat,
            p_value,
            q_value,
            flagged: !stat.is_finite(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bh_examples() {
        let q = bh_fdr(&[0.01, 0.02, 0.03, 0.04, 0.05]);
        for v in q {
            assert!((v - 0.05).abs() < 1e-15);
        }
        assert_eq!(bh_fdr(&[0.37]), vec![0.37]);
        let c = 0.2;
        assert!(bh_fdr(&[c; 6]).iter().all(|&v| (v - c).abs() < 1e-15));
        assert!(bh_fdr(&[]).is_empty());
    }

    #[test]
    fn pvalue_examples() {
        let null: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(empirical_pvalue(100.0, &null), 0.1);
        assert_eq!(empirical_pvalue(5.0, &null), 0.6);
        assert_eq!(empirical_pvalue(f64::NEG_INFINITY, &null), 1.0);
        assert_eq!(empirical_pvalue(f64::NAN, &null), 1.0);
        assert_eq!(empirical_pvalue(-1.0, &null), 1.0);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let pool = NullPool {
            effect: Effect::Gender,
            statistics: vec![],
            per_gene: BTreeMap::new(),
            permutations_per_gene: 0,
            seed: 0,
            failures: 0,
            attempted: 0,
        };
        assert_eq!(empirical_pvalues(&[1.0], &pool), Err(FmemError::EmptyPool));
    }

    #[test]
    fn critical_value_at_95() {
        assert!((critical_value(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
        assert!(critical_value(1.0).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
        assert!((quantile_sorted(&xs, 0.5) - 2.5).abs() < 1e-15);
    }
}
