mod common;

use common::normal_matrix;
use latentci::factor::{canonical_rotation, estimate_confounders, fit_em, rotate_canonical, EmOptions, FactorFit};
use latentci::parallel_analysis::{parallel_analysis, select_k_parallel_analysis, ParallelAnalysisOptions};
use latentci::pipeline::center_columns;
use latentci::seed::rng_from;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

/// `X = U W + E` with `n × k` scores, random loadings and noise scale `noise`.
fn factor_data(n: usize, p: usize, k: usize, noise: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = rng_from(seed);
    let u = normal_matrix(&mut rng, n, k);
    let w = DMatrix::from_fn(k, p, |_, _| rng.random_range(-1.5..1.5));
    let e = normal_matrix(&mut rng, n, p) * noise;
    (&u * &w + e, u, w)
}

fn off_diagonal_max(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

#[test]
fn em_is_monotone_on_100_instances() {
    for seed in 0..100u64 {
        let (n, p, k) = (40 + (seed % 7) as usize * 10, 8 + (seed % 5) as usize * 3, 1 + (seed % 3) as usize);
        let (x, _, _) = factor_data(n, p, k, 0.5 + (seed % 4) as f64 * 0.3, seed);
        let fit = fit_em(&x, k, &EmOptions::default()).unwrap();
        for pair in fit.loglik_trace.windows(2) {
            assert!(pair[1] - pair[0] >= -1e-10, "seed {seed}: {pair:?}");
        }
        assert!(fit.sigma_e.iter().all(|&s| s >= 1e-6));
    }
}

#[test]
fn canonical_invariants_after_rotation() {
    for seed in 0..10u64 {
        let (x, _, _) = factor_data(200, 20, 3, 0.7, 100 + seed);
        let fit = rotate_canonical(&fit_em(&x, 3, &EmOptions::default()).unwrap()).unwrap();
        assert!((&fit.s_u - DMatrix::identity(3, 3)).amax() < 1e-8);
        let gram = fit.scaled_precision_gram();
        assert!(off_diagonal_max(&gram) < 1e-8);
        assert!(gram[(0, 0)] > gram[(1, 1)] && gram[(1, 1)] > gram[(2, 2)]);
        for r in 0..3 {
            let row = fit.w.row(r);
            let largest = row.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(largest > 0.0);
        }
    }
}

#[test]
fn rotation_preserves_the_common_component() {
    let (x, _, _) = factor_data(150, 12, 2, 0.6, 7);
    let mut fit = fit_em(&x, 2, &EmOptions::default()).unwrap();
    // a non-canonical parameterization of the same model
    fit.s_u = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
    let (rotated, transform) = canonical_rotation(&fit).unwrap();
    let mut rng = rng_from(8);
    let u_in = normal_matrix(&mut rng, 2, 30);
    let u_out = &transform * &u_in;
    let before = fit.w.transpose() * u_in;
    let after = rotated.w.transpose() * u_out;
    assert!((before - after).amax() < 1e-10);
}

#[test]
fn scalar_whitening_example() {
    let fit = FactorFit {
        w: DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 0.25]),
        sigma_e: DVector::from_element(3, 1.0),
        s_u: DMatrix::from_element(1, 1, 4.0),
        loglik_trace: vec![],
        k: 1,
        converged: true,
    };
    let out = rotate_canonical(&fit).unwrap();
    assert!((out.s_u[(0, 0)] - 1.0).abs() < 1e-15);
    // loadings doubled; sign fixed so the largest entry is positive
    let expected = [-1.0, 2.0, -0.5];
    for j in 0..3 {
        assert!((out.w[(0, j)] - expected[j]).abs() < 1e-12);
    }
}

#[test]
fn noiseless_single_factor_recovers_direction() {
    let mut rng = rng_from(5);
    let u = normal_matrix(&mut rng, 200, 1);
    let w = DMatrix::from_element(1, 6, 1.0);
    let x = &u * &w;
    let fit = fit_em(&x, 1, &EmOptions::default()).unwrap();
    // principal angle between spans of the fitted and true loading vectors
    let a = fit.w.row(0).transpose().normalize();
    let b = w.row(0).transpose().normalize();
    let angle = a.dot(&b).abs().min(1.0).acos();
    assert!(angle < 1e-3, "angle {angle}");
}

#[test]
fn noise_variances_of_pure_noise() {
    let mut rng = rng_from(6);
    let x = normal_matrix(&mut rng, 500, 50);
    let fit = fit_em(&x, 1, &EmOptions::default()).unwrap();
    assert!(fit.sigma_e.iter().all(|&s| (0.7..=1.3).contains(&s)), "{:?}", fit.sigma_e);
}

#[test]
fn gls_reduces_to_row_mean() {
    let mut rng = rng_from(12);
    let x = normal_matrix(&mut rng, 30, 5);
    let fit = FactorFit {
        w: DMatrix::from_element(1, 5, 1.0),
        sigma_e: DVector::from_element(5, 1.0),
        s_u: DMatrix::identity(1, 1),
        loglik_trace: vec![],
        k: 1,
        converged: true,
    };
    let uhat = estimate_confounders(&fit, &x).unwrap().uhat;
    let centered = center_columns(&x);
    for i in 0..30 {
        assert!((uhat[(i, 0)] - centered.row(i).sum() / 5.0).abs() < 1e-12);
    }
}

#[test]
fn noiseless_data_with_true_parameters_gives_true_scores() {
    let mut rng = rng_from(13);
    let u = center_columns(&normal_matrix(&mut rng, 50, 2));
    let w = DMatrix::from_fn(2, 9, |_, _| rng.random_range(-1.0..1.0));
    let x = &u * &w;
    let fit = FactorFit {
        w: w.clone(),
        sigma_e: DVector::from_fn(9, |j, _| 0.5 + 0.1 * j as f64),
        s_u: DMatrix::identity(2, 2),
        loglik_trace: vec![],
        k: 2,
        converged: true,
    };
    let uhat = estimate_confounders(&fit, &x).unwrap().uhat;
    assert!((uhat - u).amax() < 1e-10);
}

#[test]
fn noiseless_reconstruction_with_fitted_model() {
    let (x, _, _) = factor_data(120, 10, 2, 0.0, 14);
    let fit = rotate_canonical(&fit_em(&x, 2, &EmOptions::default()).unwrap()).unwrap();
    let uhat = estimate_confounders(&fit, &x).unwrap().uhat;
    let centered = center_columns(&x);
    let err = (&centered - &uhat * &fit.w).norm() / centered.norm();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn confounder_estimates_are_centered() {
    let (x, _, _) = factor_data(80, 10, 2, 1.0, 15);
    let x = x.add_scalar(3.0);
    let fit = rotate_canonical(&fit_em(&x, 2, &EmOptions::default()).unwrap()).unwrap();
    let uhat = estimate_confounders(&fit, &x).unwrap().uhat;
    for c in 0..2 {
        assert!(uhat.column(c).mean().abs() < 1e-10);
    }
}

#[test]
fn parallel_analysis_finds_dominant_component() {
    let mut rng = rng_from(16);
    let a = normal_matrix(&mut rng, 200, 1);
    let b = normal_matrix(&mut rng, 1, 40);
    let x = &a * &b * 10.0 + normal_matrix(&mut rng, 200, 40) * 1e-3;
    let opts = ParallelAnalysisOptions { n_null_draws: 40, ..Default::default() };
    assert_eq!(select_k_parallel_analysis(&x, &opts).unwrap(), 1);
}

#[test]
fn parallel_analysis_is_reproducible_across_thread_counts() {
    let (x, _, _) = factor_data(100, 30, 2, 1.0, 17);
    let opts = ParallelAnalysisOptions { n_null_draws: 30, quantile: 0.95, seed: 4 };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| parallel_analysis(&x, &opts).unwrap())
    };
    let first = run(1);
    assert_eq!(first, run(3));
    assert_eq!(first, run(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_is_idempotent(seed in 0u64..10_000, k in 1usize..4) {
        let (x, _, _) = factor_data(90, 12, k, 0.8, seed);
        let once = rotate_canonical(&fit_em(&x, k, &EmOptions::default()).unwrap()).unwrap();
        let twice = rotate_canonical(&once).unwrap();
        prop_assert!((&once.w - &twice.w).amax() <= 1e-10);
        prop_assert!((&once.s_u - &twice.s_u).amax() <= 1e-10);
    }

    #[test]
    fn gls_is_linear_in_scale(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let (x, _, _) = factor_data(60, 10, 2, 1.0, seed);
        let fit = rotate_canonical(&fit_em(&x, 2, &EmOptions::default()).unwrap()).unwrap();
        let base = estimate_confounders(&fit, &x).unwrap().uhat;
        let scaled = estimate_confounders(&fit, &(&x * scale)).unwrap().uhat;
        prop_assert!((scaled - base * scale).amax() <= 1e-10 * scale.max(1.0));
    }
}
