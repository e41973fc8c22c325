//! ℓ1-penalized GLM fit with unpenalized confounder coefficients.
//!
//! Minimizes `l(η) + λ(|θ| + ‖v‖₁)` by proximal Newton: each cycle expands
//! the loss to second order at the current iterate (IRLS weights `b''`),
//! minimizes that model by cyclic coordinate descent with active-set
//! sweeps, then backtracks along the resulting direction until the true
//! objective decreases. The linear-family loss is itself quadratic, so it is
//! minimized directly in Gram form `½ ηᵀGη - cᵀη`.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::GlmFamily;
use crate::glm::{loss_from_lp, Coefficients, Design};
use crate::active_set::{truncate_at_sign_change, L1Quadratic, NewtonStep, SupportFactor};

/// KKT tolerance used to judge a fit optimal.
pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    /// Maximum number of Newton cycles.
    pub max_iter: usize,
    /// Largest coefficient change per full cycle at convergence.
    pub tol: f64,
    /// Penalize each column in proportion to its root mean square.
    pub standardize: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_iter: 10_000,
            tol: 1e-8,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedFit {
    pub coeffs: Coefficients,
    pub lambda: f64,
    pub kkt_residual: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Penalized objective after every cycle, starting point included.
    pub objective_trace: Vec<f64>,
}

#[inline]
pub(crate) fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Per-coordinate penalty multipliers: zero for confounder columns,
/// one (or the column RMS when standardizing) for observed covariates.
pub fn penalty_weights(design: &Design, opts: &LassoOptions) -> Vec<f64> {
    let n = design.n() as f64;
    (0..design.dim())
        .map(|j| {
            if j >= design.p() {
                0.0
            } else if opts.standardize {
                (design.z().column(j).norm_squared() / n).sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

/// Largest KKT violation of `η` for the weighted ℓ1 problem given the
/// loss gradient. Coordinates with infinite weight are held at zero and skipped.
pub fn kkt_violation(grad: &DVector<f64>, eta: &DVector<f64>, lambda: f64, weights: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..eta.len() {
        let pw = weights[j];
        if pw.is_infinite() {
            continue;
        }
        let thr = lambda * pw;
        let g = grad[j];
        let r = if pw == 0.0 {
            g.abs()
        } else if eta[j] != 0.0 {
            (g + thr * eta[j].signum()).abs()
        } else {
            (g.abs() - thr).max(0.0)
        };
        worst = worst.max(r);
    }
    worst
}

pub(crate) struct Solver<'a> {
    family: GlmFamily,
    z: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    weights: &'a [f64],
    opts: LassoOptions,
    /// `n⁻¹ Σ z_ij²`.
    col_sq: Vec<f64>,
    /// `(ZᵀZ/n, Zᵀy/n)` for the linear family.
    gram: Option<(DMatrix<f64>, DVector<f64>)>,
    /// Support factor carried along a path of linear-family fits.
    factor: RefCell<SupportFactor>,
}

pub(crate) struct SolverOutput {
    pub eta: DVector<f64>,
    pub lp: DVector<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

impl<'a> Solver<'a> {
    pub fn new(family: GlmFamily, design: &'a Design, weights: &'a [f64], opts: LassoOptions) -> Self {
        let z = design.z();
        let n = z.nrows() as f64;
        let col_sq = (0..z.ncols()).map(|j| z.column(j).norm_squared() / n).collect();
        let gram = (family == GlmFamily::Linear).then(|| {
            let (g, c) = raw_gram(z, design.y());
            (g / n, c / n)
        });
        Solver {
            family,
            z,
            y: design.y(),
            weights,
            opts,
            col_sq,
            gram,
            factor: RefCell::new(SupportFactor::default()),
        }
    }

    fn penalty(&self, eta: &DVector<f64>, lambda: f64) -> f64 {
        let mut s = 0.0;
        for (j, &c) in eta.iter().enumerate() {
            if c != 0.0 && self.weights[j] > 0.0 {
                s += self.weights[j] * c.abs();
            }
        }
        lambda * s
    }

    fn objective(&self, lp: &DVector<f64>, eta: &DVector<f64>, lambda: f64) -> f64 {
        loss_from_lp(self.family, self.y, lp) + self.penalty(eta, lambda)
    }

    #[inline]
    fn column(&self, j: usize) -> &[f64] {
        let n = self.z.nrows();
        &self.z.as_slice()[j * n..(j + 1) * n]
    }

    /// One coordinate-descent pass over `coords` on the quadratic model.
    /// `resid` holds `y - μ - w ⊙ Z(η_new - η)`. Returns the largest change.
    fn sweep(&self, coords: &[usize], new: &mut DVector<f64>, resid: &mut [f64], irls_w: &[f64], hdiag: &[f64], lambda: f64) -> f64 {
        let n = resid.len() as f64;
        let mut max_change = 0.0f64;
        for &j in coords {
            let h = hdiag[j];
            if h <= 1e-14 {
                continue;
            }
            let col = self.column(j);
            let g = -col.iter().zip(resid.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            let old = new[j];
            let cand = soft_threshold(h * old - g, lambda * self.weights[j]) / h;
            let delta = cand - old;
            if delta != 0.0 {
                for ((r, &c), &wi) in resid.iter_mut().zip(col).zip(irls_w) {
                    *r -= wi * c * delta;
                }
                new[j] = cand;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    fn live(&self, j: usize, eta: &DVector<f64>) -> bool {
        self.weights[j].is_finite() && (eta[j] != 0.0 || self.weights[j] == 0.0)
    }

    /// Exact minimizer of the quadratic model on the current support with
    /// signs held fixed, truncated at the first sign change (that
    /// coordinate is set to zero).
    fn newton_on_support(
        &self,
        new: &mut DVector<f64>,
        resid: &mut [f64],
        irls_w: &[f64],
        lambda: f64,
        factor: &mut SupportFactor,
    ) -> NewtonStep {
        let n = resid.len();
        let nf = n as f64;
        let target: Vec<usize> = (0..new.len()).filter(|&j| self.live(j, new)).collect();
        if target.len() >= n {
            return NewtonStep::Skipped;
        }
        let synced = factor.sync(
            &target,
            |s| {
                let root_w: Vec<f64> = irls_w.iter().map(|w| w.sqrt()).collect();
                let mut zs = DMatrix::zeros(n, s.len());
                for (r, &j) in s.iter().enumerate() {
                    for (i, &c) in self.column(j).iter().enumerate() {
                        zs[(i, r)] = root_w[i] * c;
                    }
                }
                (zs.transpose() * &zs) / nf
            },
            |rows, j| {
                let weighted: Vec<f64> = self.column(j).iter().zip(irls_w).map(|(c, w)| c * w).collect();
                DVector::from_fn(rows.len(), |r, _| {
                    self.column(rows[r]).iter().zip(&weighted).map(|(a, b)| a * b).sum::<f64>() / nf
                })
            },
        );
        if !synced {
            return NewtonStep::Skipped;
        }
        let support = factor.support().to_vec();
        let m = support.len();
        let grad: Vec<f64> = support
            .iter()
            .map(|&j| -self.column(j).iter().zip(resid.iter()).map(|(a, b)| a * b).sum::<f64>() / nf)
            .collect();
        let rhs = DVector::from_fn(m, |r, _| {
            let j = support[r];
            let pen = if self.weights[j] > 0.0 { lambda * self.weights[j] * new[j].signum() } else { 0.0 };
            -(grad[r] + pen)
        });
        let step = factor.solve(&rhs);
        let (t, blocking) = truncate_at_sign_change(&support, new, &step, |j| self.weights[j] > 0.0);
        let delta: Vec<f64> = (0..m).map(|r| if Some(r) == blocking { -new[support[r]] } else { t * step[r] }).collect();

        let mut moved = vec![0.0; n];
        let mut linear = 0.0;
        let mut pen_change = 0.0;
        for r in 0..m {
            let j = support[r];
            linear += grad[r] * delta[r];
            if self.weights[j] > 0.0 {
                let next = if Some(r) == blocking { 0.0 } else { new[j] + delta[r] };
                pen_change += lambda * self.weights[j] * (next.abs() - new[j].abs());
            }
            if delta[r] != 0.0 {
                for (mv, &c) in moved.iter_mut().zip(self.column(j)) {
                    *mv += c * delta[r];
                }
            }
        }
        let curvature = moved.iter().zip(irls_w).map(|(mv, w)| w * mv * mv).sum::<f64>() / nf;
        let change = linear + 0.5 * curvature + pen_change;
        // an edited factor can drift; refactor once before giving up
        if !change.is_finite() || change > 1e-10 * (linear.abs() + curvature) {
            let retry = !factor.is_fresh();
            factor.clear();
            return if retry {
                self.newton_on_support(new, resid, irls_w, lambda, factor)
            } else {
                NewtonStep::Skipped
            };
        }
        for r in 0..m {
            let j = support[r];
            new[j] = if Some(r) == blocking { 0.0 } else { new[j] + delta[r] };
        }
        resid.iter_mut().zip(&moved).zip(irls_w).for_each(|((r, mv), wi)| *r -= wi * mv);
        if blocking.is_some() {
            NewtonStep::Truncated
        } else {
            NewtonStep::Full
        }
    }

    /// Coordinate descent on the quadratic model until a full sweep moves
    /// no coefficient by more than `tol`.
    fn minimize_model(&self, new: &mut DVector<f64>, resid: &mut [f64], irls_w: &[f64], hdiag: &[f64], lambda: f64) {
        let dim = new.len();
        let tol = self.opts.tol;
        let max_sweeps = 100 * self.opts.max_iter.max(1);
        // unpenalized coordinates first, so penalized ones see a fitted nuisance
        let order: Vec<usize> = (0..dim)
            .filter(|&j| self.weights[j] == 0.0)
            .chain((0..dim).filter(|&j| self.weights[j] > 0.0 && self.weights[j].is_finite()))
            .collect();
        // the weights are fixed within one model, so edits stay exact
        let mut factor = SupportFactor::default();
        let mut sweeps = 0;
        loop {
            let full = self.sweep(&order, new, resid, irls_w, hdiag, lambda);
            sweeps += 1;
            if full < tol || sweeps >= max_sweeps {
                break;
            }
            while self.newton_on_support(new, resid, irls_w, lambda, &mut factor) == NewtonStep::Truncated {}
            let active: Vec<usize> = order.iter().copied().filter(|&j| self.live(j, new)).collect();
            loop {
                let ch = self.sweep(&active, new, resid, irls_w, hdiag, lambda);
                sweeps += 1;
                if ch < tol || sweeps >= max_sweeps {
                    break;
                }
            }
        }
    }

    /// Linear family: the objective is an exact quadratic in `η`.
    fn solve_gram(&self, lambda: f64, eta: DVector<f64>, start_obj: f64) -> SolverOutput {
        let (a, b) = self.gram.as_ref().expect("linear family carries a Gram matrix");
        let program = L1Quadratic {
            a,
            b,
            weights: Some(self.weights),
        };
        let mut trace = vec![start_obj];
        let max_sweeps = 100 * self.opts.max_iter.max(1);
        let run = program.solve(lambda, eta, &mut self.factor.borrow_mut(), max_sweeps, self.opts.tol, Some(&mut trace));
        SolverOutput {
            lp: self.z * &run.x,
            eta: run.x,
            n_iter: run.n_iter,
            converged: run.converged,
            trace,
        }
    }

    pub fn solve(&self, lambda: f64, mut eta: DVector<f64>) -> Result<SolverOutput> {
        let n = self.z.nrows();
        let dim = self.z.ncols();
        for j in 0..dim {
            if self.weights[j].is_infinite() {
                eta[j] = 0.0;
            }
        }
        let mut lp = self.z * &eta;
        let mut obj = self.objective(&lp, &eta, lambda);
        if !obj.is_finite() {
            return Err(Error::SolverFailure(format!("non-finite starting objective {obj}")));
        }
        if self.gram.is_some() {
            return Ok(self.solve_gram(lambda, eta, obj));
        }
        let mut trace = vec![obj];
        let mut converged = false;
        let mut n_iter = 0;
        let mut irls_w = vec![1.0; n];
        let mut hdiag = self.col_sq.clone();
        let mut resid = vec![0.0; n];

        while n_iter < self.opts.max_iter {
            n_iter += 1;
            for i in 0..n {
                let t = lp[i];
                resid[i] = self.y[i] - self.family.mean(t);
                irls_w[i] = self.family.variance(t);
            }
            let mut flat = false;
            for (j, h) in hdiag.iter_mut().enumerate() {
                let col = self.column(j);
                *h = col.iter().zip(&irls_w).map(|(c, w)| w * c * c).sum::<f64>() / n as f64;
                // curvature lost along a live column: the fit is running off to infinity
                flat |= self.weights[j].is_finite() && self.col_sq[j] > 0.0 && *h <= 1e-14;
            }
            let start_resid = resid.clone();
            let mut new = eta.clone();
            self.minimize_model(&mut new, &mut resid, &irls_w, &hdiag, lambda);

            let dir = &new - &eta;
            let max_step = dir.amax();
            if max_step == 0.0 {
                converged = !flat;
                break;
            }
            let z_dir = self.z * &dir;
            let (step, new_obj) = {
                // Armijo backtracking on the proximal Newton direction.
                let slope = -start_resid.iter().zip(z_dir.iter()).map(|(r, d)| r * d).sum::<f64>() / n as f64;
                let predicted = slope + self.penalty(&new, lambda) - self.penalty(&eta, lambda);
                let mut t = 1.0;
                let mut accepted = None;
                while t > 1e-12 {
                    let cand = &eta + &dir * t;
                    let cand_lp = &lp + &z_dir * t;
                    let f = self.objective(&cand_lp, &cand, lambda);
                    if f.is_finite() && f <= obj + 1e-4 * t * predicted.min(0.0) {
                        accepted = Some((t, f));
                        break;
                    }
                    t *= 0.5;
                }
                match accepted {
                    Some(found) => found,
                    None => {
                        // No decrease available at machine precision.
                        converged = max_step < self.opts.tol.sqrt();
                        break;
                    }
                }
            };
            if new_obj > obj + 1e-8 * obj.abs().max(1.0) {
                return Err(Error::SolverFailure(format!(
                    "objective increased from {obj} to {new_obj} in cycle {n_iter}"
                )));
            }
            if step == 1.0 {
                eta = new;
            } else {
                eta += &dir * step;
            }
            lp += &z_dir * step;
            obj = new_obj;
            trace.push(obj);
            if step * max_step < self.opts.tol {
                converged = true;
                break;
            }
        }
        Ok(SolverOutput {
            eta,
            lp,
            n_iter,
            converged,
            trace,
        })
    }
}

fn check_inputs(family: GlmFamily, design: &Design, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    family.check_response(design.y().as_slice())
}

fn finish(
    family: GlmFamily,
    design: &Design,
    weights: &[f64],
    lambda: f64,
    out: SolverOutput,
) -> Result<PenalizedFit> {
    let grad = crate::glm::gradient_from_lp(family, design, &out.lp);
    let kkt = kkt_violation(&grad, &out.eta, lambda, weights);
    if !out.converged {
        log::debug!("lasso at lambda {lambda:e} stopped after {} cycles, KKT {kkt:e}", out.n_iter);
    }
    Ok(PenalizedFit {
        coeffs: Coefficients::from_vector(&out.eta, design.p(), design.k())?,
        lambda,
        kkt_residual: kkt,
        n_iter: out.n_iter,
        converged: out.converged,
        objective_trace: out.trace,
    })
}

/// Minimizer of `l(η) + λ(|θ| + ‖v‖₁)` with `β` unpenalized.
pub fn fit_lasso(
    family: GlmFamily,
    design: &Design,
    lambda: f64,
    opts: &LassoOptions,
    warm_start: Option<&Coefficients>,
) -> Result<PenalizedFit> {
    check_inputs(family, design, lambda)?;
    let weights = penalty_weights(design, opts);
    let start = match warm_start {
        Some(c) => {
            if c.len() != design.dim() {
                return Err(Error::DimensionMismatch("warm start has the wrong length".into()));
            }
            c.to_vector()
        }
        None => DVector::zeros(design.dim()),
    };
    let out = Solver::new(family, design, &weights, *opts).solve(lambda, start)?;
    finish(family, design, &weights, lambda, out)
}

/// Warm-started fits along a decreasing `grid`.
pub fn fit_lasso_path(
    family: GlmFamily,
    design: &Design,
    grid: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<PenalizedFit>> {
    family.check_response(design.y().as_slice())?;
    let weights = penalty_weights(design, opts);
    let solver = Solver::new(family, design, &weights, *opts);
    let mut eta = DVector::zeros(design.dim());
    let mut fits = Vec::with_capacity(grid.len());
    for &lambda in grid {
        check_inputs(family, design, lambda)?;
        let out = solver.solve(lambda, eta)?;
        eta = out.eta.clone();
        fits.push(finish(family, design, &weights, lambda, out)?);
    }
    Ok(fits)
}

/// Unnormalized `(ZᵀZ, Zᵀy)`, exactly symmetric.
pub(crate) fn raw_gram(z: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let zt = z.transpose();
    let mut g = &zt * z;
    let m = g.nrows();
    for j in 0..m {
        for i in (j + 1)..m {
            g[(j, i)] = g[(i, j)];
        }
    }
    (g, zt * y)
}

/// Linear-family path from the normalized Gram pair `(ZᵀZ/n, Zᵀy/n)`
/// alone; returns the coefficient vectors.
pub(crate) fn gram_lasso_path(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    p: usize,
    grid: &[f64],
    opts: &LassoOptions,
) -> Vec<DVector<f64>> {
    let weights: Vec<f64> = (0..b.len())
        .map(|j| {
            if j >= p {
                0.0
            } else if opts.standardize {
                a[(j, j)].max(0.0).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let program = L1Quadratic {
        a,
        b,
        weights: Some(&weights),
    };
    let mut factor = SupportFactor::default();
    let mut eta = DVector::zeros(b.len());
    let max_sweeps = 100 * opts.max_iter.max(1);
    grid.iter()
        .map(|&lambda| {
            let run = program.solve(lambda, eta.clone(), &mut factor, max_sweeps, opts.tol, None);
            if !run.converged {
                log::debug!("lasso at lambda {lambda:e} stopped after {} sweeps", run.n_iter);
            }
            eta = run.x.clone();
            run.x
        })
        .collect()
}

/// Fit of the unpenalized confounder coefficients alone, `(0, 0, β̃)`.
pub fn fit_nuisance_only(family: GlmFamily, design: &Design, opts: &LassoOptions) -> Result<Coefficients> {
    family.check_response(design.y().as_slice())?;
    let weights: Vec<f64> = (0..design.dim())
        .map(|j| if j < design.p() { f64::INFINITY } else { 0.0 })
        .collect();
    let out = Solver::new(family, design, &weights, *opts).solve(0.0, DVector::zeros(design.dim()))?;
    Coefficients::from_vector(&out.eta, design.p(), design.k())
}

/// Relative margin added to `λ_max` so the boundary coordinate is zeroed
/// despite round-off in the nuisance-only fit.
const LAMBDA_MAX_GUARD: f64 = 1e-9;

/// Smallest `λ` at which every penalized coefficient is zero.
pub fn lambda_max(family: GlmFamily, design: &Design, opts: &LassoOptions) -> Result<f64> {
    let partial = fit_nuisance_only(family, design, opts)?;
    let lp = design.linear_predictor(&partial.to_vector());
    let grad = crate::glm::gradient_from_lp(family, design, &lp);
    let weights = penalty_weights(design, opts);
    let mut best = 0.0f64;
    for j in 0..design.p() {
        if weights[j] > 0.0 {
            best = best.max(grad[j].abs() / weights[j]);
        }
    }
    Ok(best * (1.0 + LAMBDA_MAX_GUARD))
}
