//! Sparse projection of the exposure onto the nuisance directions in the
//! Fisher-information metric:
//!
//! `ŵ = argmin ½ wᵀAw - wᵀb + λ'‖w‖₁`, with
//! `A = n⁻¹ Σ b''(η̂ᵀż_i) ṁ_i ṁ_iᵀ` and `b = n⁻¹ Σ b''(η̂ᵀż_i) D_i ṁ_i`,
//! where `ṁ_i` is `ż_i` without its exposure entry.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{argmin_first, check_grid, fold_members, log_grid, CvOptions, CvResult};
use crate::error::{Error, Result};
use crate::family::GlmFamily;
use crate::glm::{Coefficients, Design};
use crate::active_set::{L1Quadratic, SupportFactor};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for QuadraticOptions {
    fn default() -> Self {
        QuadraticOptions {
            max_iter: 100_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFit {
    pub w: DVector<f64>,
    pub lambda_prime: f64,
    pub kkt_residual: f64,
    pub n_iter: usize,
    pub converged: bool,
}

impl QuadraticProblem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "quadratic term {}x{} does not match linear term {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("projection program has non-finite entries".into()));
        }
        Ok(QuadraticProblem { a, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, w: &DVector<f64>, lambda: f64) -> f64 {
        0.5 * w.dot(&(&self.a * w)) - w.dot(&self.b) + lambda * w.lp_norm(1)
    }

    /// Largest KKT violation of `w`.
    pub fn kkt_residual(&self, w: &DVector<f64>, lambda: f64) -> f64 {
        let g = &self.a * w - &self.b;
        let mut worst = 0.0f64;
        for j in 0..w.len() {
            let r = if w[j] != 0.0 {
                (g[j] + lambda * w[j].signum()).abs()
            } else {
                (g[j].abs() - lambda).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    }
}

/// IRLS weights `b''(η̂ᵀż_i)`.
fn information_weights(family: GlmFamily, design: &Design, eta_hat: &Coefficients) -> Result<Vec<f64>> {
    if eta_hat.len() != design.dim() || eta_hat.beta.len() != design.k() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients of length {} do not match design dimension {}",
            eta_hat.len(),
            design.dim()
        )));
    }
    let lp = design.linear_predictor(&eta_hat.to_vector());
    Ok(lp.iter().map(|&t| family.variance(t)).collect())
}

/// Unnormalized `Σ w_i ṁ_i ṁ_iᵀ` and `Σ w_i D_i ṁ_i` over `rows`.
fn raw_moments(design: &Design, weights: &[f64], rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let z = design.z();
    let m = z.ncols() - 1;
    let mut scaled = DMatrix::zeros(rows.len(), m);
    let mut target = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let s = weights[i].sqrt();
        for j in 0..m {
            scaled[(r, j)] = s * z[(i, j + 1)];
        }
        target[r] = s * z[(i, 0)];
    }
    let mut a = scaled.transpose() * &scaled;
    for j in 0..m {
        for i in (j + 1)..m {
            a[(j, i)] = a[(i, j)];
        }
    }
    let b = scaled.tr_mul(&target);
    (a, b)
}

pub fn projection_problem(family: GlmFamily, design: &Design, eta_hat: &Coefficients) -> Result<QuadraticProblem> {
    let weights = information_weights(family, design, eta_hat)?;
    let rows: Vec<usize> = (0..design.n()).collect();
    let (a, b) = raw_moments(design, &weights, &rows);
    let n = design.n() as f64;
    QuadraticProblem::new(a / n, b / n)
}

/// Coordinate descent for `½ wᵀAw - wᵀb + λ‖w‖₁` with active-set solves.
pub fn solve_l1_quadratic(
    problem: &QuadraticProblem,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    opts: &QuadraticOptions,
) -> Result<ProjectionFit> {
    solve_with_factor(problem, lambda, warm_start, opts, &mut SupportFactor::default())
}

fn solve_with_factor(
    problem: &QuadraticProblem,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    opts: &QuadraticOptions,
    factor: &mut SupportFactor,
) -> Result<ProjectionFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda' must be finite and non-negative, got {lambda}")));
    }
    let dim = problem.dim();
    let start = match warm_start {
        Some(w0) if w0.len() == dim => w0.clone(),
        Some(_) => return Err(Error::DimensionMismatch("warm start has the wrong length".into())),
        None => DVector::zeros(dim),
    };
    let program = L1Quadratic {
        a: &problem.a,
        b: &problem.b,
        weights: None,
    };
    let run = program.solve(lambda, start, factor, opts.max_iter, opts.tol, None);
    let kkt_residual = problem.kkt_residual(&run.x, lambda);
    Ok(ProjectionFit {
        w: run.x,
        lambda_prime: lambda,
        kkt_residual,
        n_iter: run.n_iter,
        converged: run.converged,
    })
}

pub fn fit_w(family: GlmFamily, design: &Design, eta_hat: &Coefficients, lambda_prime: f64) -> Result<ProjectionFit> {
    let problem = projection_problem(family, design, eta_hat)?;
    solve_l1_quadratic(&problem, lambda_prime, None, &QuadraticOptions::default())
}

/// Warm-started solutions along a decreasing grid; returns the last.
pub fn fit_w_path(problem: &QuadraticProblem, grid: &[f64], opts: &QuadraticOptions) -> Result<ProjectionFit> {
    check_grid(grid)?;
    let mut factor = SupportFactor::default();
    let mut fit: Option<ProjectionFit> = None;
    for &l in grid {
        let next = solve_with_factor(problem, l, fit.as_ref().map(|f| &f.w), opts, &mut factor)?;
        fit = Some(next);
    }
    Ok(fit.expect("grid is non-empty"))
}

/// Selects `λ'` by the held-out value of the quadratic objective
/// `½ wᵀA_test w - wᵀb_test`, using the same fold assignment as the lasso.
pub fn cross_validate_lambda_prime(
    family: GlmFamily,
    design: &Design,
    eta_hat: &Coefficients,
    folds: &[usize],
    opts: &CvOptions,
    qopts: &QuadraticOptions,
) -> Result<CvResult> {
    if folds.len() != design.n() {
        return Err(Error::DimensionMismatch("fold assignment length differs from n".into()));
    }
    let weights = information_weights(family, design, eta_hat)?;
    let n_folds = folds.iter().max().map_or(0, |m| m + 1);
    let members: Vec<(Vec<usize>, Vec<usize>)> = (0..n_folds).map(|f| fold_members(folds, f)).collect();
    let moments: Vec<(DMatrix<f64>, DVector<f64>)> = members
        .par_iter()
        .map(|(_, test)| raw_moments(design, &weights, test))
        .collect();
    let (mut a_sum, mut b_sum) = (DMatrix::zeros(design.dim() - 1, design.dim() - 1), DVector::zeros(design.dim() - 1));
    for (a, b) in &moments {
        a_sum += a;
        b_sum += b;
    }
    let n = design.n() as f64;
    let grid = match &opts.lambda_grid {
        Some(g) => g.clone(),
        None => {
            let lmax = (&b_sum / n).amax();
            log_grid(lmax, opts.grid_ratio, opts.grid_size)
        }
    };
    check_grid(&grid)?;

    let per_fold: Vec<Vec<f64>> = (0..n_folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let (a_test, b_test) = &moments[f];
            let n_test = members[f].1.len() as f64;
            let n_train = n - n_test;
            let train = QuadraticProblem::new((&a_sum - a_test) / n_train, (&b_sum - b_test) / n_train)?;
            let mut factor = SupportFactor::default();
            let mut warm: Option<DVector<f64>> = None;
            let mut held_out = Vec::with_capacity(grid.len());
            for &l in &grid {
                let fit = solve_with_factor(&train, l, warm.as_ref(), qopts, &mut factor)?;
                // summed over held-out rows, so folds combine into a mean
                held_out.push(0.5 * fit.w.dot(&(a_test * &fit.w)) - fit.w.dot(b_test));
                warm = Some(fit.w);
            }
            Ok(held_out)
        })
        .collect::<Result<_>>()?;

    let cv_loss: Vec<f64> = (0..grid.len())
        .map(|g| per_fold.iter().map(|v| v[g]).sum::<f64>() / n)
        .collect();
    let star_index = argmin_first(&cv_loss);
    Ok(CvResult {
        lambda_star: grid[star_index],
        lambda_grid: grid,
        cv_loss,
        star_index,
        fold_assignment: folds.to_vec(),
    })
}
