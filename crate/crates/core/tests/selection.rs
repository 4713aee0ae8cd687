use fmem::simulate::{balanced_individuals, evaluate_on_grid, generate, SimulationSpec};
use fmem::{
    assemble, blue_blup, degrees_of_freedom, fit_em, score, select, smoother_matrices, Criterion,
    EmOptions, SelectionOptions, SmoothingParameters, TimeGrid,
};
use fmem_testkit::instances::{random_dataset, random_grid, random_variance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn smoothers_reproduce_fitted_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let m = rng.gen_range(3..=6);
        let n = rng.gen_range(3..=6);
        let grid = random_grid(&mut rng, m);
        let data = random_dataset(&mut rng, &grid, n, 0.25, true);
        let vc = random_variance(&mut rng, m);
        let sp = SmoothingParameters::from_log10(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)).unwrap();
        let model = assemble(&data, &vc, sp).unwrap();
        let eff = blue_blup(&model).unwrap();
        let fitted = model.fixed_fitted(&eff.eta) + model.random_fitted(&eff.gamma);
        let sm = smoother_matrices(&model).unwrap();
        let y = model.y();
        let via = (&sm.a_eta + &sm.a_gamma) * &y;
        assert!((via - &fitted).amax() < 1e-10 * (1.0 + y.amax()));
        let df = degrees_of_freedom(&model).unwrap();
        assert!((df.fixed - sm.df_fixed).abs() < 1e-8);
        assert!((df.random - sm.df_random).abs() < 1e-8);
        assert!(df.fixed > 0.0 && df.fixed <= 3.0 * m as f64 + 1e-9);
        assert!(df.random >= -1e-9 && df.random <= (n * m) as f64 + 1e-9);
    }
}

#[test]
fn degrees_of_freedom_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let m = rng.gen_range(4..=7);
        let n = rng.gen_range(4..=8);
        let grid = random_grid(&mut rng, m);
        let data = random_dataset(&mut rng, &grid, n, 0.2, false);
        let vc = random_variance(&mut rng, m);
        let rigid = assemble(&data, &vc, SmoothingParameters::new(1e12, 1.0).unwrap()).unwrap();
        let df = degrees_of_freedom(&rigid).unwrap();
        assert!((df.fixed - 6.0).abs() < 0.05, "df_fixed {}", df.fixed);
        let linear_random = assemble(&data, &vc, SmoothingParameters::new(1.0, 1e12).unwrap()).unwrap();
        let df = degrees_of_freedom(&linear_random).unwrap();
        assert!(df.random <= 2.0 * n as f64 + 0.05, "df_random {}", df.random);
    }
}

#[test]
fn degrees_of_freedom_decrease_with_smoothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = random_grid(&mut rng, 6);
    let data = random_dataset(&mut rng, &grid, 7, 0.2, true);
    let vc = random_variance(&mut rng, 6);
    let sweep: Vec<f64> = (0..10).map(|k| -4.0 + 1.5 * k as f64).collect();
    let fixed: Vec<f64> = sweep
        .iter()
        .map(|&l| {
            let model = assemble(&data, &vc, SmoothingParameters::from_log10(l, 0.0).unwrap()).unwrap();
            degrees_of_freedom(&model).unwrap().fixed
        })
        .collect();
    let random: Vec<f64> = sweep
        .iter()
        .map(|&l| {
            let model = assemble(&data, &vc, SmoothingParameters::from_log10(0.0, l).unwrap()).unwrap();
            degrees_of_freedom(&model).unwrap().random
        })
        .collect();
    for w in fixed.windows(2).chain(random.windows(2)) {
        assert!(w[1] <= w[0] + 1e-6, "{} then {}", w[0], w[1]);
    }
}

fn rough_random_curves(seed: u64) -> SimulationSpec {
    let m = 8;
    let grid = TimeGrid::new((0..m).map(|k| k as f64).collect()).unwrap();
    let p = grid.points().to_vec();
    let mut individuals = balanced_individuals(30);
    for ind in &mut individuals {
        ind.observed = Some((0..m).flat_map(|k| [k, k]).collect());
    }
    SimulationSpec {
        gene_id: "g0".into(),
        mu: evaluate_on_grid(&grid, |t| (t / 2.0).sin()),
        alpha: evaluate_on_grid(&grid, |t| 0.3 * (t / 3.0).cos()),
        beta: evaluate_on_grid(&grid, |t| 0.2 - 0.04 * t),
        d_true: (0..m)
            .map(|r| (0..m).map(|c| (-(p[r] - p[c]).powi(2) / 12.5).exp()).collect())
            .collect(),
        grid,
        individuals,
        sigma2_true: 0.1,
        seed,
    }
}

#[test]
fn simplex_lands_near_grid_minimum() {
    let spec = rough_random_curves(0).for_gene("g0", 3);
    let (data, _) = generate(&spec).unwrap();
    let sel = select(&data, Criterion::Bic, &SelectionOptions::default()).unwrap();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for a in 0..21 {
        for b in 0..21 {
            let (la, lb) = (-8.0 + a as f64, -8.0 + b as f64);
            let fit = fit_em(&data, SmoothingParameters::from_log10(la, lb).unwrap(), &EmOptions::default()).unwrap();
            let v = score(&fit, Criterion::Bic);
            if v < best.0 {
                best = (v, la, lb);
            }
        }
    }
    assert!((sel.best_sp.lambda.log10() - best.1).abs() <= 0.5, "{:?} vs {:?}", sel.best_sp, best);
    assert!((sel.best_sp.lambda_gamma.log10() - best.2).abs() <= 0.5, "{:?} vs {:?}", sel.best_sp, best);
    assert!(sel.trace.iter().all(|e| sel.criterion_value <= e.value));
}

#[test]
fn linear_truth_selects_maximal_smoothing() {
    let grid = TimeGrid::new(vec![1.0, 14.0, 28.0, 90.0, 180.0]).unwrap();
    let m = grid.len();
    let p = grid.points().to_vec();
    let spec = SimulationSpec {
        gene_id: "linear".into(),
        mu: evaluate_on_grid(&grid, |t| 1.0 + 0.01 * t),
        alpha: evaluate_on_grid(&grid, |t| 0.2 - 0.001 * t),
        beta: evaluate_on_grid(&grid, |t| 0.002 * t),
        d_true: (0..m)
            .map(|r| (0..m).map(|c| 0.3 + 0.2 * (p[r] - 90.0) * (p[c] - 90.0) / 8100.0).collect())
            .collect(),
        grid,
        individuals: balanced_individuals(22),
        sigma2_true: 0.1,
        seed: 5,
    };
    let (data, _) = generate(&spec).unwrap();
    let sel = select(&data, Criterion::Bic, &SelectionOptions::default()).unwrap();
    assert_eq!(sel.best_sp.lambda, 1e12);
}

#[test]
fn selection_is_deterministic_and_budget_zero_keeps_initial_vertex() {
    let (data, _) = generate(&rough_random_curves(1).for_gene("g1", 9)).unwrap();
    let opts = SelectionOptions {
        budget: 10,
        ..SelectionOptions::default()
    };
    let a = select(&data, Criterion::Aic, &opts).unwrap();
    let b = select(&data, Criterion::Aic, &opts).unwrap();
    assert_eq!(a, b);
    let zero = select(&data, Criterion::Bic, &SelectionOptions { budget: 0, ..SelectionOptions::default() }).unwrap();
    assert_eq!(zero.trace.len(), 3);
    let best = zero.trace.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
    assert_eq!(zero.criterion_value, best);
    let starts = [(1.0, 1.0), (10.0, 1.0), (1.0, 10.0)];
    assert!(starts
        .iter()
        .any(|&(l, g)| (zero.best_sp.lambda - l).abs() < 1e-9 && (zero.best_sp.lambda_gamma - g).abs() < 1e-9));
}
