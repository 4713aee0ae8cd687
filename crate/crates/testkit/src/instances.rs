//! Random model instances.

use fmem::{AgeGroup, Gender, GeneDataset, IndividualSeries, TimeGrid, VarianceComponents};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

const LABELS: [(Gender, AgeGroup); 4] = [
    (Gender::Female, AgeGroup::Old),
    (Gender::Male, AgeGroup::Young),
    (Gender::Male, AgeGroup::Old),
    (Gender::Female, AgeGroup::Young),
];

pub fn random_grid<R: Rng>(rng: &mut R, m: usize) -> TimeGrid {
    let mut t = rng.gen_range(-2.0..2.0);
    let pts = (0..m)
        .map(|_| {
            let here = t;
            t += rng.gen_range(0.3..3.0);
            here
        })
        .collect();
    TimeGrid::new(pts).expect("increasing grid")
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `n ≥ 3` individuals with labels covering both levels of each factor.
///
/// The first three individuals observe every design point, which keeps the
/// fixed effects estimable. Later ones drop each point with probability
/// `missing` (keeping at least one); with `replicates` points may repeat.
pub fn random_dataset<R: Rng>(
    rng: &mut R,
    grid: &TimeGrid,
    n: usize,
    missing: f64,
    replicates: bool,
) -> GeneDataset {
    let m = grid.len();
    let individuals = (0..n)
        .map(|i| {
            let (g, a) = LABELS[i % 4];
            let mut times = Vec::new();
            for (k, &t) in grid.points().iter().enumerate() {
                let keep = i < 3 || rng.gen::<f64>() >= missing || (k == m - 1 && times.is_empty());
                if keep {
                    times.push(t);
                    if replicates && rng.gen::<f64>() < 0.3 {
                        times.push(t);
                    }
                }
            }
            let values = times.iter().map(|t| (0.3 * t).sin() + normal(rng)).collect();
            IndividualSeries::new(format!("s{i}"), g, a, times, values).expect("valid series")
        })
        .collect();
    GeneDataset::new("random", grid.clone(), individuals).expect("valid dataset")
}

/// Well-conditioned random `D` plus `σ²`.
pub fn random_variance<R: Rng>(rng: &mut R, m: usize) -> VarianceComponents {
    let l = DMatrix::from_fn(m, m, |_, _| 0.5 * normal(rng));
    let d = &l * l.transpose() + DMatrix::identity(m, m) * rng.gen_range(0.2..1.0);
    VarianceComponents::new(d, rng.gen_range(0.2..1.0)).expect("valid components")
}
