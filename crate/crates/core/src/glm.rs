//! Data containers and the negative log-likelihood calculus.
//!
//! The augmented design row is `ż = (D, Q, Û)` with coefficient layout
//! `η = (θ, v, β)`: the exposure coefficient first, then the `p - 1`
//! nuisance covariates, then the `K` confounder coefficients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::family::GlmFamily;

/// Observed data for one inference problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    /// All observed covariates, `n × p`.
    pub x: DMatrix<f64>,
    /// Column of `x` holding the exposure `D`.
    pub exposure: usize,
    /// True confounders, only known in simulations.
    pub u: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, exposure: usize) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "response has {} rows, covariates have {}",
                y.len(),
                x.nrows()
            )));
        }
        if exposure >= x.ncols() {
            return Err(Error::InvalidInput(format!(
                "exposure index {exposure} out of range for {} covariates",
                x.ncols()
            )));
        }
        if let Some((i, j)) = first_non_finite(&x) {
            return Err(Error::InvalidInput(format!("covariate ({i}, {j}) is not finite")));
        }
        Ok(Dataset { y, x, exposure, u: None })
    }

    pub fn with_confounders(mut self, u: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "confounders have {} rows, data have {}",
                u.nrows(),
                self.n()
            )));
        }
        self.u = Some(u);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn exposure_column(&self) -> DVector<f64> {
        self.x.column(self.exposure).into_owned()
    }
}

pub(crate) fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Some((i, j));
            }
        }
    }
    None
}

/// `η = (θ, v, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub theta: f64,
    pub v: DVector<f64>,
    pub beta: DVector<f64>,
}

impl Coefficients {
    pub fn zeros(p: usize, k: usize) -> Self {
        Coefficients {
            theta: 0.0,
            v: DVector::zeros(p.saturating_sub(1)),
            beta: DVector::zeros(k),
        }
    }

    /// Splits a stacked vector of length `p + K`.
    pub fn from_vector(eta: &DVector<f64>, p: usize, k: usize) -> Result<Self> {
        if p == 0 || eta.len() != p + k {
            return Err(Error::DimensionMismatch(format!(
                "coefficient vector of length {} does not match p = {p}, K = {k}",
                eta.len()
            )));
        }
        Ok(Coefficients {
            theta: eta[0],
            v: eta.rows(1, p - 1).into_owned(),
            beta: eta.rows(p, k).into_owned(),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        out[0] = self.theta;
        out.rows_mut(1, self.v.len()).copy_from(&self.v);
        out.rows_mut(1 + self.v.len(), self.beta.len()).copy_from(&self.beta);
        out
    }

    pub fn len(&self) -> usize {
        1 + self.v.len() + self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `γ = (θ, v)`, the coefficients of the observed covariates.
    pub fn gamma(&self) -> DVector<f64> {
        let mut g = DVector::zeros(1 + self.v.len());
        g[0] = self.theta;
        g.rows_mut(1, self.v.len()).copy_from(&self.v);
        g
    }

    /// `ζ = (v, β)`, the nuisance coefficients.
    pub fn zeta(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.v.len() + self.beta.len());
        z.rows_mut(0, self.v.len()).copy_from(&self.v);
        z.rows_mut(self.v.len(), self.beta.len()).copy_from(&self.beta);
        z
    }

    /// Number of nonzero penalized entries of `γ`.
    pub fn support_size(&self) -> usize {
        usize::from(self.theta != 0.0) + self.v.iter().filter(|c| **c != 0.0).count()
    }
}

/// Augmented design `[D | Q | Û]` with its response.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    z: DMatrix<f64>,
    y: DVector<f64>,
    p: usize,
}

impl Design {
    pub fn new(data: &Dataset, uhat: &DMatrix<f64>) -> Result<Self> {
        let n = data.n();
        if uhat.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "confounder estimate has {} rows, data have {n}",
                uhat.nrows()
            )));
        }
        if let Some((i, j)) = first_non_finite(uhat) {
            return Err(Error::InvalidInput(format!(
                "confounder estimate ({i}, {j}) is not finite"
            )));
        }
        let p = data.p();
        let k = uhat.ncols();
        let mut z = DMatrix::zeros(n, p + k);
        z.column_mut(0).copy_from(&data.x.column(data.exposure));
        let mut dst = 1;
        for j in (0..p).filter(|&j| j != data.exposure) {
            z.column_mut(dst).copy_from(&data.x.column(j));
            dst += 1;
        }
        for j in 0..k {
            z.column_mut(p + j).copy_from(&uhat.column(j));
        }
        Ok(Design { z, y: data.y.clone(), p })
    }

    /// Builds a design from an already stacked `ż` matrix whose first `p`
    /// columns are the observed covariates (exposure first).
    pub fn from_parts(y: DVector<f64>, z: DMatrix<f64>, p: usize) -> Result<Self> {
        if y.len() != z.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "response has {} rows, design has {}",
                y.len(),
                z.nrows()
            )));
        }
        if p == 0 || p > z.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "p = {p} incompatible with {} design columns",
                z.ncols()
            )));
        }
        Ok(Design { z, y, p })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    /// Observed covariates, exposure included.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Confounder columns.
    pub fn k(&self) -> usize {
        self.z.ncols() - self.p
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Design {
        Design {
            z: self.z.select_rows(rows),
            y: self.y.select_rows(rows),
            p: self.p,
        }
    }

    pub fn linear_predictor(&self, eta: &DVector<f64>) -> DVector<f64> {
        &self.z * eta
    }

    fn check(&self, family: GlmFamily, coeffs: &Coefficients) -> Result<DVector<f64>> {
        if coeffs.v.len() + 1 != self.p || coeffs.beta.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "coefficients (1 + {} + {}) do not match design p = {}, K = {}",
                coeffs.v.len(),
                coeffs.beta.len(),
                self.p,
                self.k()
            )));
        }
        family.check_response(self.y.as_slice())?;
        Ok(coeffs.to_vector())
    }
}

/// Loss `l(η)` given the linear predictor.
pub(crate) fn loss_from_lp(family: GlmFamily, y: &DVector<f64>, lp: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let s: f64 = y
        .iter()
        .zip(lp.iter())
        .map(|(&yi, &t)| family.cumulant(t) - yi * t)
        .sum();
    s / n
}

/// `l(η) = -n⁻¹ Σ {y_i ηᵀż_i - b(ηᵀż_i)}`.
pub fn loss(family: GlmFamily, design: &Design, coeffs: &Coefficients) -> Result<f64> {
    let eta = design.check(family, coeffs)?;
    let lp = design.linear_predictor(&eta);
    Ok(loss_from_lp(family, &design.y, &lp))
}

/// `∇l(η) = -n⁻¹ Σ {y_i - b'(ηᵀż_i)} ż_i`.
pub fn gradient(family: GlmFamily, design: &Design, coeffs: &Coefficients) -> Result<DVector<f64>> {
    let eta = design.check(family, coeffs)?;
    let lp = design.linear_predictor(&eta);
    Ok(gradient_from_lp(family, design, &lp))
}

pub(crate) fn gradient_from_lp(family: GlmFamily, design: &Design, lp: &DVector<f64>) -> DVector<f64> {
    let n = design.n() as f64;
    let resid = DVector::from_iterator(
        design.n(),
        design.y.iter().zip(lp.iter()).map(|(&y, &t)| family.mean(t) - y),
    );
    design.z.tr_mul(&resid) / n
}

/// `∇²l(η) = n⁻¹ Σ b''(ηᵀż_i) ż_i ż_iᵀ`.
pub fn hessian(family: GlmFamily, design: &Design, coeffs: &Coefficients) -> Result<DMatrix<f64>> {
    let eta = design.check(family, coeffs)?;
    let lp = design.linear_predictor(&eta);
    let weights: Vec<f64> = lp.iter().map(|&t| family.variance(t)).collect();
    Ok(weighted_gram(&design.z, &weights))
}

/// `n⁻¹ Zᵀ diag(w) Z`.
pub(crate) fn weighted_gram(z: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let n = z.nrows();
    let mut scaled = z.clone();
    for (i, &w) in weights.iter().enumerate() {
        let s = w.sqrt();
        scaled.row_mut(i).scale_mut(s);
    }
    let mut g = scaled.transpose() * &scaled;
    g /= n as f64;
    // exact symmetry
    for j in 0..g.ncols() {
        for i in (j + 1)..g.nrows() {
            g[(j, i)] = g[(i, j)];
        }
    }
    g
}
