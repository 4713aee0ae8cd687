//! Synthetic gene datasets with known ground truth.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FmemError, Result};
use crate::model::{AgeGroup, Gender, GeneDataset, IndividualSeries};
use crate::seed::derive_seed;
use crate::spline::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimIndividual {
    pub subject_id: String,
    pub gender: Gender,
    pub age_group: AgeGroup,
    /// Observed design-point indices, repeats meaning replicates; `None` observes every point once.
    #[serde(default)]
    pub observed: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub gene_id: String,
    pub grid: TimeGrid,
    pub individuals: Vec<SimIndividual>,
    /// Curves evaluated at the design points.
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub d_true: Vec<Vec<f64>>,
    pub sigma2_true: f64,
    pub seed: u64,
}

/// Realized random effects and noise behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mu: DVector<f64>,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    /// `n × M`, row `i` is `γ_i` at the design points.
    pub gamma: DMatrix<f64>,
    /// Stacked in observation order.
    pub noise: DVector<f64>,
    pub d_true: DMatrix<f64>,
    pub sigma2_true: f64,
}

/// Evaluates `f` at each design point.
pub fn evaluate_on_grid(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
    grid.points().iter().map(|&t| f(t)).collect()
}

/// `n` individuals cycling through (F, old), (M, young), (M, old), (F, young).
pub fn balanced_individuals(n: usize) -> Vec<SimIndividual> {
    const LABELS: [(Gender, AgeGroup); 4] = [
        (Gender::Female, AgeGroup::Old),
        (Gender::Male, AgeGroup::Young),
        (Gender::Male, AgeGroup::Old),
        (Gender::Female, AgeGroup::Young),
    ];
    (0..n)
        .map(|i| SimIndividual {
            subject_id: format!("s{:03}", i + 1),
            gender: LABELS[i % 4].0,
            age_group: LABELS[i % 4].1,
            observed: None,
        })
        .collect()
}

/// Days 1, 14, 28, 90 and 180.
pub fn case_study_grid() -> TimeGrid {
    TimeGrid::new(vec![1.0, 14.0, 28.0, 90.0, 180.0]).expect("valid grid")
}

/// 22 individuals on the case-study grid, the last one missing the final day.
pub fn case_study_individuals() -> Vec<SimIndividual> {
    let mut inds = balanced_individuals(22);
    inds[21].observed = Some(vec![0, 1, 2, 3]);
    inds
}

fn matrix_square_root(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(d.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(FmemError::InvalidInput("D_true is not positive semi-definite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

impl SimulationSpec {
    pub fn d_matrix(&self) -> Result<DMatrix<f64>> {
        let m = self.grid.len();
        if self.d_true.len() != m || self.d_true.iter().any(|r| r.len() != m) {
            return Err(FmemError::Dimension(format!("D_true must be {m}×{m}")));
        }
        let d = DMatrix::from_fn(m, m, |r, c| self.d_true[r][c]);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(FmemError::NonFinite("D_true"));
        }
        if (&d - d.transpose()).amax() > 1e-12 * d.amax().max(1.0) {
            return Err(FmemError::InvalidInput("D_true is not symmetric".into()));
        }
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.grid.len();
        for (name, curve) in [("mu", &self.mu), ("alpha", &self.alpha), ("beta", &self.beta)] {
            if curve.len() != m {
                return Err(FmemError::Dimension(format!("{name} has {} values, grid has {m}", curve.len())));
            }
            if curve.iter().any(|v| !v.is_finite()) {
                return Err(FmemError::NonFinite("simulated curve"));
            }
        }
        if !(self.sigma2_true >= 0.0) || !self.sigma2_true.is_finite() {
            return Err(FmemError::InvalidInput(format!("sigma2_true = {}", self.sigma2_true)));
        }
        matrix_square_root(&self.d_matrix()?)?;
        let has = |g: Gender| self.individuals.iter().any(|i| i.gender == g);
        let has_age = |a: AgeGroup| self.individuals.iter().any(|i| i.age_group == a);
        if !(has(Gender::Male) && has(Gender::Female)) {
            return Err(FmemError::Inestimable(crate::error::Factor::Gender));
        }
        if !(has_age(AgeGroup::Young) && has_age(AgeGroup::Old)) {
            return Err(FmemError::Inestimable(crate::error::Factor::Age));
        }
        for ind in &self.individuals {
            if let Some(obs) = &ind.observed {
                if obs.is_empty() || obs.iter().any(|&k| k >= m) || obs.windows(2).any(|w| w[0] > w[1]) {
                    return Err(FmemError::InvalidInput(format!(
                        "subject {}: observed indices must be non-decreasing and below {m}",
                        ind.subject_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy of this spec for another gene, seeded from `master` and the gene id.
    pub fn for_gene(&self, gene_id: impl Into<String>, master: u64) -> Self {
        let gene_id = gene_id.into();
        let seed = derive_seed(master, &gene_id, 0);
        Self {
            gene_id,
            seed,
            ..self.clone()
        }
    }
}

pub fn generate(spec: &SimulationSpec) -> Result<(GeneDataset, GroundTruth)> {
    spec.validate()?;
    let m = spec.grid.len();
    let d = spec.d_matrix()?;
    let root = matrix_square_root(&d)?;
    let sigma = spec.sigma2_true.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.individuals.len();
    let mut gamma = DMatrix::zeros(n, m);
    let mut noise = Vec::new();
    let mut series = Vec::with_capacity(n);
    let all: Vec<usize> = (0..m).collect();
    for (i, ind) in spec.individuals.iter().enumerate() {
        let z = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let g = &root * z;
        gamma.set_row(i, &g.transpose());
        let (sg, sa) = (ind.gender.sign(), ind.age_group.sign());
        let obs = ind.observed.as_deref().unwrap_or(&all);
        let mut times = Vec::with_capacity(obs.len());
        let mut values = Vec::with_capacity(obs.len());
        for &k in obs {
            let e = sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            noise.push(e);
            times.push(spec.grid.points()[k]);
            values.push(spec.mu[k] + sg * spec.alpha[k] + sa * spec.beta[k] + g[k] + e);
        }
        series.push(IndividualSeries::new(
            ind.subject_id.clone(),
            ind.gender,
            ind.age_group,
            times,
            values,
        )?);
    }
    let data = GeneDataset::new(spec.gene_id.clone(), spec.grid.clone(), series)?;
    let truth = GroundTruth {
        mu: DVector::from_column_slice(&spec.mu),
        alpha: DVector::from_column_slice(&spec.alpha),
        beta: DVector::from_column_slice(&spec.beta),
        gamma,
        noise: DVector::from_vec(noise),
        d_true: d,
        sigma2_true: spec.sigma2_true,
    };
    Ok((data, truth))
}
