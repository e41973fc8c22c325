//! Maximum-likelihood factor analysis for `X = WᵀU + E` with diagonal noise.
//!
//! The EM iteration keeps `S_u = I_K` (its scale is absorbed into `W`);
//! [`rotate_canonical`] afterwards maps any fit onto the identifiable
//! parameterization with `S_u = I_K` and `p⁻¹ W Σ_e⁻¹ Wᵀ` diagonal with
//! decreasing entries, each factor signed so its largest loading is positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::first_non_finite;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative change of the objective below which iteration stops.
    pub tol: f64,
    /// Lower bound for each noise variance (Heywood guard).
    pub variance_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 1000,
            tol: 1e-8,
            variance_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorFit {
    /// Loadings, `K × p`.
    pub w: DMatrix<f64>,
    /// Diagonal of `Σ_e`.
    pub sigma_e: DVector<f64>,
    /// Confounder covariance, `K × K`.
    pub s_u: DMatrix<f64>,
    /// `-(2p)⁻¹ log|Σ_x| - (2p)⁻¹ tr(S_x Σ_x⁻¹)` at every iterate.
    pub loglik_trace: Vec<f64>,
    pub k: usize,
    pub converged: bool,
}

impl FactorFit {
    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    /// `p⁻¹ W Σ_e⁻¹ Wᵀ`.
    pub fn scaled_precision_gram(&self) -> DMatrix<f64> {
        let p = self.p() as f64;
        let mut scaled = self.w.clone();
        for (j, &s) in self.sigma_e.iter().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / s);
        }
        scaled * self.w.transpose() / p
    }
}

/// Column means and the `1/n` sample covariance.
fn centered_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let means = x.row_mean().transpose();
    let mut xc = x.clone();
    for (j, &m) in means.iter().enumerate() {
        xc.column_mut(j).add_scalar_mut(-m);
    }
    let mut s = (xc.transpose() * &xc) / n;
    for j in 0..s.ncols() {
        for i in (j + 1)..s.nrows() {
            s[(j, i)] = s[(i, j)];
        }
    }
    (means, s)
}

/// Objective and the quantities the EM step reuses.
struct EmState {
    objective: f64,
    /// `S Ψ⁻¹ Λ`, `p × K`.
    s_psi_lambda: DMatrix<f64>,
    /// `(I + Λᵀ Ψ⁻¹ Λ)⁻¹`.
    m_inv: DMatrix<f64>,
}

fn em_state(s: &DMatrix<f64>, lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<EmState> {
    let (p, k) = lambda.shape();
    let mut psi_lambda = lambda.clone();
    for j in 0..p {
        psi_lambda.row_mut(j).scale_mut(1.0 / psi[j]);
    }
    let m = DMatrix::identity(k, k) + lambda.transpose() * &psi_lambda;
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidState("I + ΛᵀΨ⁻¹Λ not positive definite".into()))?;
    let log_det_m = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let m_inv = chol.inverse();
    let s_psi_lambda = s * &psi_lambda;
    let inner = psi_lambda.transpose() * &s_psi_lambda;
    let log_det = psi.iter().map(|v| v.ln()).sum::<f64>() + log_det_m;
    let trace_plain: f64 = (0..p).map(|j| s[(j, j)] / psi[j]).sum();
    let trace_corr = (&m_inv * inner).trace();
    let objective = -(log_det + trace_plain - trace_corr) / (2.0 * p as f64);
    Ok(EmState {
        objective,
        s_psi_lambda,
        m_inv,
    })
}

/// Fits the `K`-factor model to `x` (`n × p`) by EM.
pub fn fit_em(x: &DMatrix<f64>, k: usize, opts: &EmOptions) -> Result<FactorFit> {
    let (n, p) = x.shape();
    if k == 0 {
        return Err(Error::InvalidConfig("factor count must be positive".into()));
    }
    if k >= p {
        return Err(Error::InvalidConfig(format!(
            "factor count {k} must be smaller than the number of columns {p}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 rows, got {n}")));
    }
    if let Some((i, j)) = first_non_finite(x) {
        return Err(Error::InvalidInput(format!("x[{i}, {j}] is not finite")));
    }
    let floor = opts.variance_floor;
    let (_, s) = centered_covariance(x);
    let scale = (0..p).map(|j| s[(j, j)]).fold(0.0f64, f64::max);
    let informative = (0..p).filter(|&j| s[(j, j)] > 1e-12 * scale.max(1e-300)).count();
    if scale <= 0.0 || informative < k {
        return Err(Error::DegenerateData(format!(
            "{informative} columns with nonzero variance, need at least {k}"
        )));
    }

    // Warm start from the leading principal components.
    let eig = SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut lambda = DMatrix::zeros(p, k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        lambda.set_column(c, &(eig.eigenvectors.column(idx) * scale));
    }
    let mut psi = DVector::from_fn(p, |j, _| {
        let explained: f64 = lambda.row(j).iter().map(|l| l * l).sum();
        (s[(j, j)] - explained).max(floor)
    });

    let mut state = em_state(&s, &lambda, &psi)?;
    let mut trace = vec![state.objective];
    let mut converged = false;
    for _ in 0..opts.max_iter {
        // E-step moments: β = M⁻¹ΛᵀΨ⁻¹, so S βᵀ = S Ψ⁻¹ Λ M⁻¹.
        let s_beta_t = &state.s_psi_lambda * &state.m_inv;
        let mut beta = &state.m_inv * lambda.transpose();
        for j in 0..p {
            beta.column_mut(j).scale_mut(1.0 / psi[j]);
        }
        let c_uu = &state.m_inv + &beta * &s_beta_t;
        let c_chol = c_uu
            .cholesky()
            .ok_or_else(|| Error::InvalidState("E[uuᵀ] not positive definite".into()))?;
        // Λ_new = S βᵀ C⁻¹, solved row-wise through Cᵀ = C.
        lambda = c_chol.solve(&s_beta_t.transpose()).transpose();
        for j in 0..p {
            let explained: f64 = (0..k).map(|c| lambda[(j, c)] * s_beta_t[(j, c)]).sum();
            psi[j] = (s[(j, j)] - explained).max(floor);
        }
        let next = em_state(&s, &lambda, &psi)?;
        let prev = state.objective;
        state = next;
        trace.push(state.objective);
        if (state.objective - prev).abs() <= opts.tol * prev.abs().max(1e-12) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("factor EM stopped after {} iterations without converging", opts.max_iter);
    }

    Ok(FactorFit {
        w: lambda.transpose(),
        sigma_e: psi,
        s_u: DMatrix::identity(k, k),
        loglik_trace: trace,
        k,
        converged,
    })
}

/// Rotates `fit` to the canonical identifiable form and returns the matrix
/// `T` mapping confounders of the input parameterization to the output one
/// (`U_out = T U_in`, `W_outᵀ U_out = W_inᵀ U_in`).
pub fn canonical_rotation(fit: &FactorFit) -> Result<(FactorFit, DMatrix<f64>)> {
    let k = fit.k;
    let p = fit.p() as f64;
    // Step 1: whiten S_u = L Lᵀ, W₁ = Lᵀ W, U₁ = L⁻¹ U.
    let chol = fit
        .s_u
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidState("confounder covariance is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidState("singular whitening factor".into()))?;
    let w1 = l.transpose() * &fit.w;

    // Step 2: eigenvectors of p⁻¹ W₁ Σ_e⁻¹ W₁ᵀ.
    let mut scaled = w1.clone();
    for (j, &s) in fit.sigma_e.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let mut gram = &scaled * w1.transpose() / p;
    for j in 0..k {
        for i in (j + 1)..k {
            let avg = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = avg;
            gram[(j, i)] = avg;
        }
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for pair in order.windows(2) {
        if eig.eigenvalues[pair[0]] - eig.eigenvalues[pair[1]] < 1e-10 {
            log::warn!("repeated eigenvalues in canonical rotation; factor order is convention-only");
        }
    }
    // O₂ᵀ with rows ordered by decreasing eigenvalue.
    let mut o2t = DMatrix::zeros(k, k);
    for (r, &idx) in order.iter().enumerate() {
        o2t.set_row(r, &eig.eigenvectors.column(idx).transpose());
    }
    let mut w_out = &o2t * &w1;
    for r in 0..k {
        let mut best = 0;
        for j in 1..w_out.ncols() {
            if w_out[(r, j)].abs() > w_out[(r, best)].abs() {
                best = j;
            }
        }
        if w_out[(r, best)] < 0.0 {
            w_out.row_mut(r).neg_mut();
            o2t.row_mut(r).neg_mut();
        }
    }
    let transform = o2t * l_inv;
    let rotated = FactorFit {
        w: w_out,
        sigma_e: fit.sigma_e.clone(),
        s_u: DMatrix::identity(k, k),
        loglik_trace: fit.loglik_trace.clone(),
        k,
        converged: fit.converged,
    };
    Ok((rotated, transform))
}

pub fn rotate_canonical(fit: &FactorFit) -> Result<FactorFit> {
    canonical_rotation(fit).map(|(f, _)| f)
}

/// Recovered confounders `Û`, `n × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderEstimate {
    pub uhat: DMatrix<f64>,
}

/// `Û_i = (W Σ_e⁻¹ Wᵀ)⁻¹ W Σ_e⁻¹ (X_i - X̄)`.
pub fn estimate_confounders(fit: &FactorFit, x: &DMatrix<f64>) -> Result<ConfounderEstimate> {
    let p = fit.p();
    if x.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "x has {} columns, loadings have {p}",
            x.ncols()
        )));
    }
    if fit.sigma_e.len() != p || fit.w.nrows() != fit.k {
        return Err(Error::DimensionMismatch("inconsistent factor fit".into()));
    }
    let mut b = fit.w.clone();
    for (j, &s) in fit.sigma_e.iter().enumerate() {
        b.column_mut(j).scale_mut(1.0 / s);
    }
    let mut g = &b * fit.w.transpose();
    for j in 0..fit.k {
        for i in (j + 1)..fit.k {
            let avg = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = avg;
            g[(j, i)] = avg;
        }
    }
    let ev = g.clone().symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > 0.0) || hi / lo > 1e12 {
        return Err(Error::NumericalRank(format!(
            "W Σ_e⁻¹ Wᵀ has condition number {:e}",
            hi / lo
        )));
    }
    let means = x.row_mean();
    let mut xc = x.clone();
    for (j, &m) in means.iter().enumerate() {
        xc.column_mut(j).add_scalar_mut(-m);
    }
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::NumericalRank("W Σ_e⁻¹ Wᵀ not positive definite".into()))?;
    // Ûᵀ = G⁻¹ B Xcᵀ
    let rhs = &b * xc.transpose();
    let uhat = chol.solve(&rhs).transpose();
    Ok(ConfounderEstimate { uhat })
}
