//! End-to-end inference for one exposure: factor count, factor fit,
//! canonical rotation, confounder recovery, cross-validated lasso,
//! cross-validated projection and the one-step correction.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cv::{cross_validate_lambda, CvOptions, CvResult};
use crate::error::{Error, Result, Stage, StageExt};
use crate::factor::{canonical_rotation, estimate_confounders, fit_em, EmOptions, FactorFit};
use crate::family::GlmFamily;
use crate::glm::{Dataset, Design};
use crate::inference::{debias, wald_interval, InferenceResult, ScoreMode};
use crate::lasso::{fit_lasso, LassoOptions, PenalizedFit};
use crate::parallel_analysis::{
    parallel_analysis_with_reference, NullReference, ParallelAnalysis, ParallelAnalysisOptions,
};
use crate::projection::{cross_validate_lambda_prime, fit_w_path, projection_problem, ProjectionFit, QuadraticOptions};
use crate::seed::{derive_seed, TAG_PARALLEL_ANALYSIS};

/// Number of latent factors: chosen by parallel analysis or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "FactorCountRepr", into = "FactorCountRepr")]
pub enum FactorCount {
    #[default]
    Auto,
    Fixed(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FactorCountRepr {
    Fixed(usize),
    Word(String),
}

impl TryFrom<FactorCountRepr> for FactorCount {
    type Error = String;

    fn try_from(r: FactorCountRepr) -> std::result::Result<Self, String> {
        match r {
            FactorCountRepr::Fixed(k) => Ok(FactorCount::Fixed(k)),
            FactorCountRepr::Word(w) if w == "auto" => Ok(FactorCount::Auto),
            FactorCountRepr::Word(w) => Err(format!("expected \"auto\" or a non-negative integer, got \"{w}\"")),
        }
    }
}

impl From<FactorCount> for FactorCountRepr {
    fn from(k: FactorCount) -> Self {
        match k {
            FactorCount::Auto => FactorCountRepr::Word("auto".into()),
            FactorCount::Fixed(k) => FactorCountRepr::Fixed(k),
        }
    }
}

impl FromStr for FactorCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(FactorCount::Auto);
        }
        s.parse::<usize>()
            .map(FactorCount::Fixed)
            .map_err(|_| Error::InvalidConfig(format!("k must be 'auto' or a non-negative integer, got '{s}'")))
    }
}

impl fmt::Display for FactorCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorCount::Auto => f.write_str("auto"),
            FactorCount::Fixed(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub alpha: f64,
    pub seed: u64,
    pub k: FactorCount,
    pub score_mode: ScoreMode,
    pub n_folds: usize,
    pub grid_size: usize,
    pub grid_ratio: f64,
    pub lasso: LassoOptions,
    pub projection: QuadraticOptions,
    pub em: EmOptions,
    pub pa_draws: usize,
    pub pa_quantile: f64,
    /// Adds an unpenalized all-ones column next to the confounders.
    pub intercept: bool,
    /// Linear family only: rescale the interval by the residual variance.
    pub estimate_dispersion: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            alpha: 0.05,
            seed: 0,
            k: FactorCount::Auto,
            score_mode: ScoreMode::AtEstimate,
            n_folds: 10,
            grid_size: 100,
            grid_ratio: 0.01,
            lasso: LassoOptions::default(),
            projection: QuadraticOptions::default(),
            em: EmOptions::default(),
            pa_draws: 100,
            pa_quantile: 0.95,
            intercept: false,
            estimate_dispersion: false,
        }
    }
}

impl PipelineOptions {
    pub fn parallel_analysis(&self) -> ParallelAnalysisOptions {
        ParallelAnalysisOptions {
            n_null_draws: self.pa_draws,
            quantile: self.pa_quantile,
            seed: derive_seed(self.seed, TAG_PARALLEL_ANALYSIS),
        }
    }

    pub fn cv(&self) -> CvOptions {
        CvOptions {
            n_folds: self.n_folds,
            grid_size: self.grid_size,
            grid_ratio: self.grid_ratio,
            seed: self.seed,
            lambda_grid: None,
        }
    }
}

/// Test and batch hooks. A confounder override skips the factor step
/// entirely; a null reference saves recomputing parallel-analysis draws
/// when many datasets share one shape.
#[derive(Debug, Clone, Default)]
pub struct PipelineHooks<'a> {
    pub confounder_override: Option<&'a DMatrix<f64>>,
    pub null_reference: Option<&'a NullReference>,
}

/// Result of the confounder-recovery stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderStep {
    pub k: usize,
    pub uhat: DMatrix<f64>,
    pub factor_fit: Option<FactorFit>,
    pub parallel_analysis: Option<ParallelAnalysis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub inference: InferenceResult,
    pub k_used: usize,
    pub n: usize,
    pub p: usize,
    /// Nonzero entries of `η̂`.
    pub support_size: usize,
    pub lasso: PenalizedFit,
    pub lambda_cv: CvResult,
    pub projection: ProjectionFit,
    pub lambda_prime_cv: CvResult,
}

/// Centers each column.
pub fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// Chooses `K` and recovers `Û` from the covariate matrix alone.
pub fn estimate_confounder_step(x: &DMatrix<f64>, opts: &PipelineOptions, hooks: &PipelineHooks) -> Result<ConfounderStep> {
    let (n, p) = x.shape();
    let (k, pa) = match opts.k {
        FactorCount::Fixed(k) => (k, None),
        FactorCount::Auto => {
            let pa_opts = opts.parallel_analysis();
            let computed;
            let reference = match hooks.null_reference {
                Some(r) if r.matches(n, p, &pa_opts) => r,
                _ => {
                    computed = NullReference::compute(n, p, &pa_opts).stage(Stage::SelectK)?;
                    &computed
                }
            };
            let pa = parallel_analysis_with_reference(x, reference).stage(Stage::SelectK)?;
            (pa.k, Some(pa))
        }
    };
    if k == 0 {
        return Ok(ConfounderStep {
            k,
            uhat: DMatrix::zeros(n, 0),
            factor_fit: None,
            parallel_analysis: pa,
        });
    }
    let fit = fit_em(x, k, &opts.em).stage(Stage::FactorFit)?;
    if !fit.converged {
        log::warn!("factor EM stopped at max_iter = {} before converging", opts.em.max_iter);
    }
    let (rotated, _) = canonical_rotation(&fit).stage(Stage::Rotation)?;
    let uhat = estimate_confounders(&rotated, x).stage(Stage::Confounders)?.uhat;
    Ok(ConfounderStep {
        k,
        uhat,
        factor_fit: Some(rotated),
        parallel_analysis: pa,
    })
}

/// Everything after confounder recovery, for exposure column `exposure`.
pub fn infer_with_confounders(
    family: GlmFamily,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    exposure: usize,
    uhat: &DMatrix<f64>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let data = Dataset::new(y.clone(), x.clone(), exposure)?;
    family.check_response(y.as_slice())?;
    let surrogates = if opts.intercept {
        let mut s = uhat.clone().resize_horizontally(uhat.ncols() + 1, 1.0);
        s.column_mut(uhat.ncols()).fill(1.0);
        s
    } else {
        uhat.clone()
    };
    let design = Design::new(&data, &surrogates)?;

    let cv_opts = opts.cv();
    let lambda_cv = cross_validate_lambda(family, &design, &cv_opts, &opts.lasso).stage(Stage::LambdaCv)?;
    let lasso = fit_lasso(family, &design, lambda_cv.lambda_star, &opts.lasso, None).stage(Stage::Lasso)?;
    if !lasso.converged {
        log::warn!("lasso at lambda = {:e} did not converge", lasso.lambda);
    }
    let eta_hat = &lasso.coeffs;

    let lambda_prime_cv = cross_validate_lambda_prime(
        family,
        &design,
        eta_hat,
        &lambda_cv.fold_assignment,
        &cv_opts,
        &opts.projection,
    )
    .stage(Stage::LambdaPrimeCv)?;
    let problem = projection_problem(family, &design, eta_hat).stage(Stage::Projection)?;
    let path: Vec<f64> = lambda_prime_cv.lambda_grid[..=lambda_prime_cv.star_index].to_vec();
    let projection = fit_w_path(&problem, &path, &opts.projection).stage(Stage::Projection)?;

    let mut inference = debias(family, &design, eta_hat, &projection, opts.alpha, opts.score_mode).stage(Stage::Debias)?;
    if opts.estimate_dispersion && family == GlmFamily::Linear {
        let lp = design.linear_predictor(&eta_hat.to_vector());
        let dof = design.n().saturating_sub(eta_hat.support_size()).max(1) as f64;
        let sigma2 = (y - lp).norm_squared() / dof;
        inference = wald_interval(
            inference.theta_hat,
            inference.theta_tilde,
            inference.score / sigma2,
            inference.info_partial / sigma2,
            design.n(),
            opts.alpha,
        )
        .stage(Stage::Debias)?;
    }

    Ok(PipelineOutput {
        inference,
        k_used: uhat.ncols(),
        n: design.n(),
        p: design.p(),
        support_size: eta_hat.support_size(),
        lasso,
        lambda_cv,
        projection,
        lambda_prime_cv,
    })
}

pub fn full_pipeline_with_hooks(
    family: GlmFamily,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    exposure: usize,
    opts: &PipelineOptions,
    hooks: &PipelineHooks,
) -> Result<PipelineOutput> {
    if exposure >= x.ncols() {
        return Err(Error::InvalidInput(format!(
            "exposure index {exposure} out of range for {} covariates",
            x.ncols()
        )));
    }
    match hooks.confounder_override {
        Some(u) => infer_with_confounders(family, y, x, exposure, u, opts),
        None => {
            let step = estimate_confounder_step(x, opts, hooks)?;
            infer_with_confounders(family, y, x, exposure, &step.uhat, opts)
        }
    }
}

pub fn full_pipeline(
    family: GlmFamily,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    exposure: usize,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    full_pipeline_with_hooks(family, y, x, exposure, opts, &PipelineHooks::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn factor_count_parsing() {
        assert_eq!("auto".parse::<FactorCount>().unwrap(), FactorCount::Auto);
        assert_eq!("3".parse::<FactorCount>().unwrap(), FactorCount::Fixed(3));
        assert!("-1".parse::<FactorCount>().is_err());
        assert_eq!(serde_json::to_string(&FactorCount::Auto).unwrap(), "\"auto\"");
        assert_eq!(serde_json::from_str::<FactorCount>("2").unwrap(), FactorCount::Fixed(2));
        assert!(serde_json::from_str::<FactorCount>("\"three\"").is_err());
    }

    fn noise_problem(n: usize, p: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
        let mut rng = rng_from(seed);
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| x[(i, 1)] + rng.sample::<f64, _>(StandardNormal));
        (y, x)
    }

    #[test]
    fn no_factors_detected_runs_without_confounders() {
        let (y, x) = noise_problem(120, 20, 1);
        let opts = PipelineOptions { grid_size: 20, pa_draws: 30, ..Default::default() };
        let out = full_pipeline(GlmFamily::Linear, &y, &x, 0, &opts).unwrap();
        assert_eq!(out.k_used, 0);
        let naive = infer_with_confounders(GlmFamily::Linear, &y, &x, 0, &DMatrix::zeros(120, 0), &opts).unwrap();
        assert_eq!(out, naive);
    }

    #[test]
    fn stage_tags_propagate() {
        let (y, x) = noise_problem(30, 5, 2);
        let opts = PipelineOptions { k: FactorCount::Fixed(5), ..Default::default() };
        let err = full_pipeline(GlmFamily::Linear, &y, &x, 0, &opts).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: Stage::FactorFit, .. }));
        assert!(err.to_string().starts_with("stage fit_em"));
    }

    #[test]
    fn override_matches_direct_call() {
        let (y, x) = noise_problem(80, 10, 3);
        let mut rng = rng_from(9);
        let u = center_columns(&DMatrix::from_fn(80, 2, |_, _| StandardNormal.sample(&mut rng)));
        let opts = PipelineOptions { grid_size: 15, ..Default::default() };
        let hooks = PipelineHooks { confounder_override: Some(&u), null_reference: None };
        let a = full_pipeline_with_hooks(GlmFamily::Linear, &y, &x, 0, &opts, &hooks).unwrap();
        let b = infer_with_confounders(GlmFamily::Linear, &y, &x, 0, &u, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dispersion_rescales_only_the_interval() {
        let (mut y, x) = noise_problem(100, 8, 4);
        y *= 3.0;
        let base = PipelineOptions { k: FactorCount::Fixed(0), grid_size: 15, ..Default::default() };
        let scaled = PipelineOptions { estimate_dispersion: true, ..base.clone() };
        let a = full_pipeline(GlmFamily::Linear, &y, &x, 0, &base).unwrap().inference;
        let b = full_pipeline(GlmFamily::Linear, &y, &x, 0, &scaled).unwrap().inference;
        assert_eq!(a.theta_tilde, b.theta_tilde);
        assert!(b.ci_length() > 2.0 * a.ci_length());
    }
}
