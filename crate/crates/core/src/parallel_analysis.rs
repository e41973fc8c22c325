//! Horn's parallel analysis for the number of factors.
//!
//! Observed correlation-matrix eigenvalues are compared, rank by rank, with
//! an upper quantile of eigenvalues from i.i.d. standard-normal matrices of
//! the same shape. `K` is the number of leading ranks whose observed
//! eigenvalue exceeds the null quantile.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::first_non_finite;
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParallelAnalysisOptions {
    pub n_null_draws: usize,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for ParallelAnalysisOptions {
    fn default() -> Self {
        ParallelAnalysisOptions {
            n_null_draws: 100,
            quantile: 0.95,
            seed: 0,
        }
    }
}

/// Per-rank null quantiles for one `(n, p)` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NullReference {
    pub n: usize,
    pub p: usize,
    pub opts: ParallelAnalysisOptions,
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelAnalysis {
    pub k: usize,
    pub observed: Vec<f64>,
    pub null_quantiles: Vec<f64>,
}

fn check_shape(n: usize, p: usize, opts: &ParallelAnalysisOptions) -> Result<()> {
    if n < 3 || p < 2 {
        return Err(Error::InvalidInput(format!(
            "parallel analysis needs n >= 3 and p >= 2, got {n} x {p}"
        )));
    }
    if opts.n_null_draws == 0 {
        return Err(Error::InvalidConfig("n_null_draws must be positive".into()));
    }
    if !(opts.quantile > 0.0 && opts.quantile < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "quantile must lie in (0, 1), got {}",
            opts.quantile
        )));
    }
    Ok(())
}

/// Eigenvalues of the sample correlation matrix, largest first.
/// Constant columns contribute zero rows and columns.
pub fn correlation_eigenvalues(x: &DMatrix<f64>) -> Vec<f64> {
    let mut xs = x.clone();
    for mut col in xs.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let corr = xs.transpose() * &xs;
    let mut ev: Vec<f64> = corr.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Linear-interpolation sample quantile of sorted data.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl NullReference {
    pub fn compute(n: usize, p: usize, opts: &ParallelAnalysisOptions) -> Result<Self> {
        check_shape(n, p, opts)?;
        let draws: Vec<Vec<f64>> = (0..opts.n_null_draws)
            .into_par_iter()
            .map(|d| {
                let mut rng = rng_from(derive_seed(opts.seed, d as u64));
                let z = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
                correlation_eigenvalues(&z)
            })
            .collect();
        let quantiles = (0..p)
            .map(|r| {
                let mut at_rank: Vec<f64> = draws.iter().map(|ev| ev[r]).collect();
                at_rank.sort_by(f64::total_cmp);
                sorted_quantile(&at_rank, opts.quantile)
            })
            .collect();
        Ok(NullReference {
            n,
            p,
            opts: *opts,
            quantiles,
        })
    }

    pub fn matches(&self, n: usize, p: usize, opts: &ParallelAnalysisOptions) -> bool {
        self.n == n && self.p == p && self.opts == *opts
    }
}

pub fn parallel_analysis_with_reference(x: &DMatrix<f64>, reference: &NullReference) -> Result<ParallelAnalysis> {
    let (n, p) = x.shape();
    if n != reference.n || p != reference.p {
        return Err(Error::DimensionMismatch(format!(
            "null reference is for {} x {}, data are {n} x {p}",
            reference.n, reference.p
        )));
    }
    if let Some((i, j)) = first_non_finite(x) {
        return Err(Error::InvalidInput(format!("x[{i}, {j}] is not finite")));
    }
    let observed = correlation_eigenvalues(x);
    let k = observed
        .iter()
        .zip(&reference.quantiles)
        .take_while(|(o, q)| o > q)
        .count();
    Ok(ParallelAnalysis {
        k,
        observed,
        null_quantiles: reference.quantiles.clone(),
    })
}

pub fn parallel_analysis(x: &DMatrix<f64>, opts: &ParallelAnalysisOptions) -> Result<ParallelAnalysis> {
    let (n, p) = x.shape();
    check_shape(n, p, opts)?;
    let reference = NullReference::compute(n, p, opts)?;
    parallel_analysis_with_reference(x, &reference)
}

pub fn select_k_parallel_analysis(x: &DMatrix<f64>, opts: &ParallelAnalysisOptions) -> Result<usize> {
    parallel_analysis(x, opts).map(|pa| pa.k)
}
