use fmem::{build_incidence, build_roughness, roughness_functional, NaturalCubicSpline, TimeGrid};
use fmem_testkit::instances::{normal, random_grid};
use fmem_testkit::spline::{evaluate, piecewise_coefficients, roughness_by_quadrature};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn quadratic_form_equals_integrated_curvature() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..200 {
        let m = rng.gen_range(3..=12);
        let grid = random_grid(&mut rng, m);
        let f: Vec<f64> = (0..m).map(|_| 3.0 * normal(&mut rng)).collect();
        let g = build_roughness(&grid).unwrap().g;
        let fv = DVector::from_column_slice(&f);
        let quad = (fv.transpose() * &g * &fv)[(0, 0)];
        let exact = roughness_by_quadrature(grid.points(), &f);
        assert!((quad - exact).abs() <= 1e-10 * exact.max(1e-300), "{quad} vs {exact}");
    }
}

#[test]
fn spline_matches_dense_piecewise_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let m = rng.gen_range(3..=9);
        let grid = random_grid(&mut rng, m);
        let f: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
        let spline = NaturalCubicSpline::new(&grid, &f).unwrap();
        let coeffs = piecewise_coefficients(grid.points(), &f);
        for k in 0..=40 {
            let t = grid.start() + (grid.end() - grid.start()) * k as f64 / 40.0;
            let want = evaluate(grid.points(), &coeffs, t);
            assert!((spline.eval(t) - want).abs() < 1e-10 * (1.0 + want.abs()));
        }
        let exact = roughness_by_quadrature(grid.points(), &f);
        assert!((roughness_functional(&spline) - exact).abs() <= 1e-10 * exact);
    }
}

#[test]
fn incidence_shapes_follow_observations() {
    let grid = TimeGrid::new(vec![1.0, 14.0, 28.0, 90.0, 180.0]).unwrap();
    let full = build_incidence(&grid, &[1.0, 14.0, 28.0, 90.0, 180.0]).unwrap();
    assert_eq!(full.to_dense(), DMatrix::identity(5, 5));
    let missing = build_incidence(&grid, &[1.0, 14.0, 28.0, 90.0]).unwrap();
    assert_eq!((missing.rows(), missing.cols()), (4, 5));
    assert!(missing.to_dense().column(4).iter().all(|&v| v == 0.0));
    let dup = build_incidence(&grid, &[14.0, 14.0]).unwrap().to_dense();
    assert_eq!(dup.row(0), dup.row(1));
    assert!(build_incidence(&grid, &[15.0]).is_err());
}

fn grid_strategy() -> impl Strategy<Value = Vec<f64>> {
    (3usize..10).prop_flat_map(|m| {
        (-5.0f64..5.0, prop::collection::vec(0.05f64..4.0, m - 1)).prop_map(|(start, gaps)| {
            let mut pts = vec![start];
            for g in gaps {
                let last = *pts.last().unwrap();
                pts.push(last + g);
            }
            pts
        })
    })
}

proptest! {
    #[test]
    fn roughness_is_psd_with_linear_null_space(pts in grid_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grid = TimeGrid::new(pts.clone()).unwrap();
        let g = build_roughness(&grid).unwrap().g;
        let m = pts.len();
        prop_assert!((&g - g.transpose()).amax() <= 1e-12 * g.amax());
        let eig = SymmetricEigen::new(g.clone()).eigenvalues;
        let top = eig.amax();
        prop_assert!(eig.iter().all(|&l| l >= -1e-10 * top));
        prop_assert_eq!(eig.iter().filter(|&&l| l > 1e-9 * top).count(), m - 2);
        let line = DVector::from_iterator(m, pts.iter().map(|t| a + b * t));
        prop_assert!((&g * line).amax() <= 1e-9 * top * (1.0 + a.abs() + b.abs()) * (1.0 + pts.iter().fold(0.0f64, |x, t| x.max(t.abs()))));
    }

    #[test]
    fn roughness_scales_quadratically(pts in grid_strategy(), c in -10.0f64..10.0, seed in 0u64..1000) {
        let grid = TimeGrid::new(pts.clone()).unwrap();
        let g = build_roughness(&grid).unwrap().g;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DVector::from_fn(pts.len(), |_, _| normal(&mut rng));
        let q = (f.transpose() * &g * &f)[(0, 0)];
        let scaled = &f * c;
        let qc = (scaled.transpose() * &g * &scaled)[(0, 0)];
        prop_assert!((qc - c * c * q).abs() <= 1e-9 * (1.0 + c * c * q));
    }
}
