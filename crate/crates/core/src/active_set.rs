//! Coordinate descent for ℓ1-penalized convex quadratics, finished by exact
//! solves on the active set through a Cholesky factor that is edited one
//! column at a time as the support changes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::lasso::soft_threshold;

/// Refactor from scratch after this many column edits.
const MAX_EDITS: usize = 64;

/// Pivots with `l_jj² ≤ PIVOT_FLOOR · h_jj` mark the support as singular.
const PIVOT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NewtonStep {
    Full,
    Truncated,
    Skipped,
}

/// Cholesky factor of a Hessian block `H[S, S]` for a support `S` kept in
/// the factor's own column order.
#[derive(Default)]
pub(crate) struct SupportFactor {
    support: Vec<usize>,
    chol: Option<Cholesky<f64, Dyn>>,
    edits: usize,
}

impl SupportFactor {
    pub fn clear(&mut self) {
        self.support.clear();
        self.chol = None;
        self.edits = 0;
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// True when the factor was computed directly rather than edited.
    pub fn is_fresh(&self) -> bool {
        self.edits == 0
    }

    /// Brings the factor to the support `target` (any order). `block(S)`
    /// returns `H[S, S]`; `column(rows, j)` returns `H[rows, j]`. Returns
    /// false when the block is numerically singular.
    pub fn sync(
        &mut self,
        target: &[usize],
        block: impl Fn(&[usize]) -> DMatrix<f64>,
        column: impl Fn(&[usize], usize) -> DVector<f64>,
    ) -> bool {
        if target.is_empty() {
            self.clear();
            return false;
        }
        if self.chol.is_some() && self.edits < MAX_EDITS {
            let top = target.iter().chain(&self.support).copied().max().unwrap_or(0) + 1;
            let mut wanted = vec![false; top];
            let mut present = vec![false; top];
            target.iter().for_each(|&j| wanted[j] = true);
            self.support.iter().for_each(|&j| present[j] = true);
            let removals: Vec<usize> = (0..self.support.len()).filter(|&r| !wanted[self.support[r]]).collect();
            let additions: Vec<usize> = target.iter().copied().filter(|&j| !present[j]).collect();
            let m = self.support.len();
            if removals.is_empty() && additions.is_empty() {
                return true;
            }
            if removals.len() < m && removals.len() + additions.len() <= m / 8 + 4 && self.edit(&removals, &additions, &column) {
                return true;
            }
        }
        self.rebuild(target, block)
    }

    fn edit(&mut self, removals: &[usize], additions: &[usize], column: &impl Fn(&[usize], usize) -> DVector<f64>) -> bool {
        let Some(mut chol) = self.chol.take() else {
            return false;
        };
        for &pos in removals.iter().rev() {
            chol = chol.remove_column(pos);
            self.support.remove(pos);
            self.edits += 1;
        }
        for &j in additions {
            let m = self.support.len();
            self.support.push(j);
            let col = column(&self.support, j);
            let diag = col[m];
            let next = chol.insert_column(m, col);
            let pivot = next.l_dirty()[(m, m)];
            if !(pivot.is_finite() && pivot * pivot > PIVOT_FLOOR * diag) {
                self.clear();
                return false;
            }
            chol = next;
            self.edits += 1;
        }
        self.chol = Some(chol);
        true
    }

    fn rebuild(&mut self, target: &[usize], block: impl Fn(&[usize]) -> DMatrix<f64>) -> bool {
        self.support = target.to_vec();
        self.edits = 0;
        let h = block(&self.support);
        let diag: Vec<f64> = h.diagonal().iter().copied().collect();
        self.chol = h.cholesky().filter(|c| {
            let l = c.l_dirty();
            diag.iter().enumerate().all(|(r, &d)| l[(r, r)] * l[(r, r)] > PIVOT_FLOOR * d)
        });
        if self.chol.is_none() {
            self.support.clear();
        }
        self.chol.is_some()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.as_ref().expect("factor is synced").solve(rhs)
    }
}

/// Step length along `step` from `x` that stops at the first penalized
/// coordinate crossing zero, and that coordinate's position in `support`.
pub(crate) fn truncate_at_sign_change(support: &[usize], x: &DVector<f64>, step: &DVector<f64>, penalized: impl Fn(usize) -> bool) -> (f64, Option<usize>) {
    let mut t = 1.0;
    let mut blocking = None;
    for (r, &j) in support.iter().enumerate() {
        if !penalized(j) || x[j] == 0.0 {
            continue;
        }
        let next = x[j] + step[r];
        if next == 0.0 || next.signum() != x[j].signum() {
            let tj = -x[j] / step[r];
            if tj < t {
                t = tj;
                blocking = Some(r);
            }
        }
    }
    (t, blocking)
}

/// `½ xᵀAx - bᵀx + λ Σ ω_j |x_j|`, with `ω_j = 0` for unpenalized and
/// `ω_j = ∞` for frozen coordinates.
pub(crate) struct L1Quadratic<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub weights: Option<&'a [f64]>,
}

pub(crate) struct QuadraticRun {
    pub x: DVector<f64>,
    pub n_iter: usize,
    pub converged: bool,
}

impl L1Quadratic<'_> {
    fn weight(&self, j: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[j])
    }

    fn penalty(&self, x: &DVector<f64>, lambda: f64) -> f64 {
        let s: f64 = x
            .iter()
            .enumerate()
            .filter(|(j, c)| **c != 0.0 && self.weight(*j) > 0.0)
            .map(|(j, c)| self.weight(j) * c.abs())
            .sum();
        lambda * s
    }

    /// Objective from the maintained gradient `Ax - b`.
    pub fn objective_with_grad(&self, x: &DVector<f64>, grad: &DVector<f64>, lambda: f64) -> f64 {
        0.5 * (x.dot(grad) - x.dot(self.b)) + self.penalty(x, lambda)
    }

    fn sweep(&self, coords: &[usize], lambda: f64, x: &mut DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let mut max_change = 0.0f64;
        for &j in coords {
            let ajj = self.a[(j, j)];
            if ajj <= 0.0 {
                continue;
            }
            let old = x[j];
            let cand = soft_threshold(ajj * old - grad[j], lambda * self.weight(j)) / ajj;
            let delta = cand - old;
            if delta != 0.0 {
                grad.axpy(delta, &self.a.column(j), 1.0);
                x[j] = cand;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    fn live(&self, j: usize, x: &DVector<f64>) -> bool {
        let w = self.weight(j);
        w.is_finite() && (x[j] != 0.0 || w == 0.0)
    }

    /// Exact minimizer on the current support with signs held fixed,
    /// truncated at the first sign change (that coordinate is set to zero).
    fn newton_on_support(&self, lambda: f64, x: &mut DVector<f64>, grad: &mut DVector<f64>, factor: &mut SupportFactor) -> NewtonStep {
        let target: Vec<usize> = (0..x.len()).filter(|&j| self.live(j, x)).collect();
        let a = self.a;
        let synced = factor.sync(
            &target,
            |s| DMatrix::from_fn(s.len(), s.len(), |r, c| a[(s[r], s[c])]),
            |rows, j| DVector::from_fn(rows.len(), |r, _| a[(rows[r], j)]),
        );
        if !synced {
            return NewtonStep::Skipped;
        }
        let support = factor.support().to_vec();
        let m = support.len();
        let rhs = DVector::from_fn(m, |r, _| {
            let j = support[r];
            let w = self.weight(j);
            let pen = if w > 0.0 { lambda * w * x[j].signum() } else { 0.0 };
            -(grad[j] + pen)
        });
        let step = factor.solve(&rhs);
        let (t, blocking) = truncate_at_sign_change(&support, x, &step, |j| self.weight(j) > 0.0);
        let delta = DVector::from_fn(m, |r, _| if Some(r) == blocking { -x[support[r]] } else { t * step[r] });

        // reject a step from a drifted factor that fails to decrease the objective
        let mut linear = 0.0;
        let mut curvature = 0.0;
        let mut pen_change = 0.0;
        for r in 0..m {
            let j = support[r];
            let hd: f64 = (0..m).map(|c| a[(j, support[c])] * delta[c]).sum();
            linear += grad[j] * delta[r];
            curvature += delta[r] * hd;
            let w = self.weight(j);
            if w > 0.0 {
                let next = if Some(r) == blocking { 0.0 } else { x[j] + delta[r] };
                pen_change += lambda * w * (next.abs() - x[j].abs());
            }
        }
        let change = linear + 0.5 * curvature + pen_change;
        if !change.is_finite() || change > 1e-10 * (linear.abs() + curvature.abs()) {
            let retry = !factor.is_fresh();
            factor.clear();
            return if retry { self.newton_on_support(lambda, x, grad, factor) } else { NewtonStep::Skipped };
        }
        for r in 0..m {
            let j = support[r];
            if delta[r] != 0.0 {
                grad.axpy(delta[r], &a.column(j), 1.0);
                x[j] = if Some(r) == blocking { 0.0 } else { x[j] + delta[r] };
            }
        }
        if blocking.is_some() {
            NewtonStep::Truncated
        } else {
            NewtonStep::Full
        }
    }

    /// Runs until a full sweep moves no coordinate by `tol` or more, or
    /// `max_iter` sweeps are spent. When `trace` is given, the objective is
    /// appended after every full cycle.
    pub fn solve(
        &self,
        lambda: f64,
        mut x: DVector<f64>,
        factor: &mut SupportFactor,
        max_iter: usize,
        tol: f64,
        mut trace: Option<&mut Vec<f64>>,
    ) -> QuadraticRun {
        let dim = x.len();
        for j in 0..dim {
            if self.weight(j).is_infinite() {
                x[j] = 0.0;
            }
        }
        let order: Vec<usize> = (0..dim)
            .filter(|&j| self.weight(j) == 0.0)
            .chain((0..dim).filter(|&j| self.weight(j) > 0.0 && self.weight(j).is_finite()))
            .collect();
        let mut grad = self.a * &x - self.b;
        let mut n_iter = 0;
        let mut converged = false;
        while n_iter < max_iter {
            n_iter += 1;
            let full = self.sweep(&order, lambda, &mut x, &mut grad);
            if full < tol {
                converged = true;
            } else {
                // each truncated step removes one coordinate, so this terminates
                while self.newton_on_support(lambda, &mut x, &mut grad, factor) == NewtonStep::Truncated {}
                let active: Vec<usize> = order.iter().copied().filter(|&j| self.live(j, &x)).collect();
                while n_iter < max_iter {
                    n_iter += 1;
                    if self.sweep(&active, lambda, &mut x, &mut grad) < tol {
                        break;
                    }
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.objective_with_grad(&x, &grad, lambda));
            }
            if converged {
                break;
            }
        }
        QuadraticRun { x, n_iter, converged }
    }
}
