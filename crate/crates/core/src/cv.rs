//! K-fold cross-validation over a log-spaced penalty grid.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::GlmFamily;
use crate::glm::Design;
use crate::lasso::{fit_lasso_path, gram_lasso_path, lambda_max, raw_gram, LassoOptions};
use crate::seed::{derive_seed, rng_from, TAG_FOLDS};

const MAX_FOLD_DRAWS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub n_folds: usize,
    pub grid_size: usize,
    /// Smallest grid value as a fraction of the largest.
    pub grid_ratio: f64,
    pub seed: u64,
    /// Explicit decreasing grid, replacing the automatic one.
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            n_folds: 10,
            grid_size: 100,
            grid_ratio: 0.01,
            seed: 0,
            lambda_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    /// Mean held-out criterion per grid value.
    pub cv_loss: Vec<f64>,
    pub lambda_star: f64,
    pub star_index: usize,
    pub fold_assignment: Vec<usize>,
}

/// `size` values from `max` down to `ratio · max`, equally spaced in log scale.
pub fn log_grid(max: f64, ratio: f64, size: usize) -> Vec<f64> {
    if size <= 1 || max <= 0.0 {
        return vec![max];
    }
    let (hi, lo) = (max.ln(), (max * ratio).ln());
    (0..size)
        .map(|i| {
            if i == 0 {
                max
            } else {
                (hi + (lo - hi) * i as f64 / (size - 1) as f64).exp()
            }
        })
        .collect()
}

/// First index attaining the minimum.
pub(crate) fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Seeded random partition into `n_folds` near-equal folds. When `labels`
/// is given (binary responses) each class is dealt across folds separately
/// and the draw is repeated if some fold still ends up with one class.
pub fn assign_folds(n: usize, n_folds: usize, labels: Option<&[f64]>, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 || n < n_folds {
        return Err(Error::InvalidConfig(format!(
            "cross-validation needs n >= n_folds >= 2, got n = {n}, n_folds = {n_folds}"
        )));
    }
    for attempt in 0..MAX_FOLD_DRAWS {
        let mut rng = rng_from(derive_seed(seed, TAG_FOLDS.wrapping_add(attempt)));
        let mut folds = vec![0usize; n];
        match labels {
            None => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                for (pos, &i) in idx.iter().enumerate() {
                    folds[i] = pos % n_folds;
                }
                return Ok(folds);
            }
            Some(y) => {
                let mut pos = 0usize;
                for class in [0.0, 1.0] {
                    let mut idx: Vec<usize> = (0..n).filter(|&i| y[i] == class).collect();
                    idx.shuffle(&mut rng);
                    for &i in &idx {
                        folds[i] = pos % n_folds;
                        pos += 1;
                    }
                }
                let mixed = (0..n_folds).all(|f| {
                    let mut seen = [false; 2];
                    for i in 0..n {
                        if folds[i] == f {
                            seen[usize::from(y[i] == 1.0)] = true;
                        }
                    }
                    seen[0] && seen[1]
                });
                if mixed {
                    return Ok(folds);
                }
            }
        }
    }
    Err(Error::InvalidConfig(format!(
        "could not draw {n_folds} folds containing both response classes after {MAX_FOLD_DRAWS} attempts"
    )))
}

pub(crate) fn fold_members(folds: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &f) in folds.iter().enumerate() {
        if f == fold {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

pub(crate) fn folds_for(family: GlmFamily, design: &Design, opts: &CvOptions) -> Result<Vec<usize>> {
    let labels = (family == GlmFamily::Logistic).then(|| design.y().as_slice());
    assign_folds(design.n(), opts.n_folds, labels, opts.seed)
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || grid.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidConfig("lambda grid must be non-negative and decreasing".into()));
    }
    Ok(())
}

/// Selects `λ` by minimum mean held-out deviance, warm-starting each
/// fold's path along the decreasing grid.
pub fn cross_validate_lambda(
    family: GlmFamily,
    design: &Design,
    opts: &CvOptions,
    lasso: &LassoOptions,
) -> Result<CvResult> {
    let folds = folds_for(family, design, opts)?;
    cross_validate_lambda_with_folds(family, design, opts, lasso, folds)
}

pub fn cross_validate_lambda_with_folds(
    family: GlmFamily,
    design: &Design,
    opts: &CvOptions,
    lasso: &LassoOptions,
    folds: Vec<usize>,
) -> Result<CvResult> {
    family.check_response(design.y().as_slice())?;
    if folds.len() != design.n() {
        return Err(Error::DimensionMismatch("fold assignment length differs from n".into()));
    }
    let grid = match &opts.lambda_grid {
        Some(g) => g.clone(),
        None => {
            let lmax = lambda_max(family, design, lasso)?;
            log_grid(lmax, opts.grid_ratio, opts.grid_size)
        }
    };
    check_grid(&grid)?;
    let n_folds = folds.iter().max().map_or(0, |m| m + 1);

    let gram = (family == GlmFamily::Linear).then(|| raw_gram(design.z(), design.y()));
    let per_fold: Vec<Vec<f64>> = (0..n_folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let (train, test) = fold_members(&folds, f);
            let test_design = design.select_rows(&test);
            let etas: Vec<DVector<f64>> = match &gram {
                Some((g, c)) => {
                    // training Gram by subtracting the held-out rows
                    let (g_test, c_test) = raw_gram(test_design.z(), test_design.y());
                    let n_train = train.len() as f64;
                    gram_lasso_path(&((g - g_test) / n_train), &((c - c_test) / n_train), design.p(), &grid, lasso)
                }
                None => fit_lasso_path(family, &design.select_rows(&train), &grid, lasso)?
                    .iter()
                    .map(|fit| fit.coeffs.to_vector())
                    .collect(),
            };
            Ok(etas
                .iter()
                .map(|eta| {
                    let lp = test_design.linear_predictor(eta);
                    test_design
                        .y()
                        .iter()
                        .zip(lp.iter())
                        .map(|(&y, &t)| family.unit_deviance(y, t))
                        .sum::<f64>()
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let n = design.n() as f64;
    let cv_loss: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|dev| dev[g]).sum::<f64>() / n)
        .collect();
    let star_index = argmin_first(&cv_loss);
    Ok(CvResult {
        lambda_star: grid[star_index],
        lambda_grid: grid,
        cv_loss,
        star_index,
        fold_assignment: folds,
    })
}
