#![allow(dead_code)]

use latentci::seed::rng_from;
use latentci::{Coefficients, Dataset, Design, GlmFamily};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

pub const FAMILIES: [GlmFamily; 3] = [GlmFamily::Linear, GlmFamily::Logistic, GlmFamily::Poisson];

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Response drawn from `family` at linear predictor `t`.
pub fn draw_response(family: GlmFamily, t: f64, rng: &mut impl Rng) -> f64 {
    match family {
        GlmFamily::Linear => t + rng.sample::<f64, _>(StandardNormal),
        GlmFamily::Logistic => f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-t).exp())),
        GlmFamily::Poisson => Poisson::new(t.exp()).unwrap().sample(rng),
    }
}

/// Design with `p` covariates and `k` confounders, a few live coefficients
/// and a moderate linear predictor.
pub fn random_design(family: GlmFamily, n: usize, p: usize, k: usize, seed: u64) -> Design {
    let mut rng = rng_from(seed);
    let x = normal_matrix(&mut rng, n, p);
    let u = normal_matrix(&mut rng, n, k);
    let y = DVector::from_fn(n, |i, _| {
        let mut t = 0.6 * x[(i, 0)] - 0.4 * x[(i, 1 % p)];
        for c in 0..k {
            t += 0.4 * u[(i, c)];
        }
        let t = if family == GlmFamily::Poisson { 0.5 * t } else { t };
        draw_response(family, t, &mut rng)
    });
    Design::new(&Dataset::new(y, x, 0).unwrap(), &u).unwrap()
}

pub fn random_coefficients(p: usize, k: usize, scale: f64, seed: u64) -> Coefficients {
    let mut rng = rng_from(seed);
    let eta = DVector::from_fn(p + k, |_, _| scale * rng.random_range(-1.0..1.0));
    Coefficients::from_vector(&eta, p, k).unwrap()
}
