//! Synthetic confounded designs and coverage sweeps for the proposed,
//! oracle (true confounders) and naive (no confounders) methods.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::GlmFamily;
use crate::glm::Dataset;
use crate::inference::InferenceResult;
use crate::parallel_analysis::NullReference;
use crate::pipeline::{
    center_columns, full_pipeline_with_hooks, infer_with_confounders, FactorCount, PipelineHooks, PipelineOptions,
};
use crate::seed::rng_stream;

pub const K_TRUE: usize = 3;
pub const BETA_STAR: [f64; K_TRUE] = [1.0, 1.0, 1.0];
/// Failure share above which a run is invalid.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loading {
    /// Block-diagonal loadings 0.5, 1 and 1.5, one block of `p / 3` columns per factor.
    DiagBlocks,
    /// Every loading drawn from Unif[0, 1], redrawn per replication.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    Oracle,
    Naive,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Proposed, Method::Oracle, Method::Naive];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Oracle => "oracle",
            Method::Naive => "naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

fn default_replications() -> usize {
    200
}
fn default_alpha() -> f64 {
    0.05
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_grid_size() -> usize {
    100
}
fn default_pa_draws() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub family: GlmFamily,
    pub loading: Loading,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub k_mode: FactorCount,
    #[serde(default)]
    pub theta_star: f64,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_pa_draws")]
    pub pa_draws: usize,
}

/// A rejected configuration field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigProblem {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl SimConfig {
    /// Configuration with all defaults for the given shape and design.
    pub fn new(n: usize, p: usize, family: GlmFamily, loading: Loading) -> Self {
        SimConfig {
            n,
            p,
            family,
            loading,
            replications: default_replications(),
            alpha: default_alpha(),
            seed: 0,
            methods: default_methods(),
            k_mode: FactorCount::Auto,
            theta_star: 0.0,
            grid_size: default_grid_size(),
            pa_draws: default_pa_draws(),
        }
    }

    pub fn check(&self) -> std::result::Result<(), ConfigProblem> {
        let fail = |field, message: String| Err(ConfigProblem { field, message });
        if self.p < 4 {
            return fail("p", format!("p must be at least 4, got {}", self.p));
        }
        if self.loading == Loading::DiagBlocks && self.p % 3 != 0 {
            return fail("p", format!("p must be divisible by 3 for diag_blocks loading, got {}", self.p));
        }
        if self.n < 10 {
            return fail("n", format!("n must be at least 10 for 10-fold cross-validation, got {}", self.n));
        }
        if self.replications == 0 {
            return fail("replications", "replications must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail("alpha", format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.methods.is_empty() {
            return fail("methods", "methods must name at least one method".into());
        }
        if self.methods.iter().enumerate().any(|(i, m)| self.methods[..i].contains(m)) {
            return fail("methods", "methods must not repeat".into());
        }
        if let FactorCount::Fixed(k) = self.k_mode {
            if k >= self.p {
                return fail("k_mode", format!("k_mode must be below p, got {k}"));
            }
        }
        if !self.theta_star.is_finite() {
            return fail("theta_star", "theta_star must be finite".into());
        }
        if self.grid_size == 0 {
            return fail("grid_size", "grid_size must be positive".into());
        }
        if self.pa_draws == 0 {
            return fail("pa_draws", "pa_draws must be positive".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|p| Error::InvalidConfig(p.message))
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            alpha: self.alpha,
            seed: self.seed,
            k: self.k_mode,
            grid_size: self.grid_size,
            pa_draws: self.pa_draws,
            ..Default::default()
        }
    }

    /// `η* = (θ*, v*, β*)` with `v* = (1, 0, …, 0)`.
    pub fn true_coefficients(&self) -> DVector<f64> {
        let mut eta = DVector::zeros(self.p + K_TRUE);
        eta[0] = self.theta_star;
        eta[1] = 1.0;
        for (j, b) in BETA_STAR.iter().enumerate() {
            eta[self.p + j] = *b;
        }
        eta
    }
}

/// Block-diagonal `3 × p` loadings with values 0.5, 1 and 1.5.
pub fn diag_block_loadings(p: usize) -> DMatrix<f64> {
    let block = p / K_TRUE;
    DMatrix::from_fn(K_TRUE, p, |k, j| {
        if j / block == k {
            0.5 * (k + 1) as f64
        } else {
            0.0
        }
    })
}

/// Replication `rep_index` of the design, with true confounders retained.
/// Each replication draws from its own stream, so any subset can be
/// regenerated in isolation.
pub fn generate_dataset(config: &SimConfig, rep_index: usize) -> Result<Dataset> {
    config.validate()?;
    let (n, p) = (config.n, config.p);
    let mut rng = rng_stream(config.seed, rep_index as u64);
    let w = match config.loading {
        Loading::DiagBlocks => diag_block_loadings(p),
        Loading::Uniform => DMatrix::from_fn(K_TRUE, p, |_, _| rng.random::<f64>()),
    };
    let u = DMatrix::from_fn(n, K_TRUE, |_, _| StandardNormal.sample(&mut rng));
    let e = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let x = &u * &w + e;
    let beta = DVector::from_row_slice(&BETA_STAR);
    let lp = x.column(0) * config.theta_star + x.column(1) + &u * beta;
    let y = match config.family {
        GlmFamily::Linear => lp.map(|t| t + Distribution::<f64>::sample(&StandardNormal, &mut rng)),
        GlmFamily::Logistic => lp.map(|t| f64::from(rng.random::<f64>() < GlmFamily::Logistic.mean(t))),
        GlmFamily::Poisson => {
            let mut draws = DVector::zeros(n);
            for i in 0..n {
                let mean = GlmFamily::Poisson.mean(lp[i]);
                draws[i] = Poisson::new(mean)
                    .map_err(|e| Error::InvalidState(format!("poisson mean {mean}: {e}")))?
                    .sample(&mut rng);
            }
            draws
        }
    };
    Dataset::new(y, x, 0)?.with_confounders(u)
}

/// One method's result on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub inference: InferenceResult,
    pub k_selected: usize,
}

pub fn run_method(method: Method, dataset: &Dataset, config: &SimConfig) -> Result<MethodOutcome> {
    run_method_with_reference(method, dataset, config, None)
}

fn run_method_with_reference(
    method: Method,
    dataset: &Dataset,
    config: &SimConfig,
    reference: Option<&NullReference>,
) -> Result<MethodOutcome> {
    let opts = config.pipeline_options();
    let (y, x, d) = (&dataset.y, &dataset.x, dataset.exposure);
    let out = match method {
        Method::Proposed => {
            let hooks = PipelineHooks { confounder_override: None, null_reference: reference };
            full_pipeline_with_hooks(config.family, y, x, d, &opts, &hooks)?
        }
        Method::Oracle => {
            let u = dataset
                .u
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("oracle method needs the true confounders".into()))?;
            infer_with_confounders(config.family, y, x, d, &center_columns(u), &opts)?
        }
        Method::Naive => infer_with_confounders(config.family, y, x, d, &DMatrix::zeros(dataset.n(), 0), &opts)?,
    };
    Ok(MethodOutcome {
        inference: out.inference,
        k_selected: out.k_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub method: Method,
    pub rep_index: usize,
    pub theta_tilde: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
    pub ci_length: f64,
    pub k_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub method: Method,
    pub rep_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Share of successful replications whose interval contains `θ*`;
    /// absent, like the means, when no replication succeeded.
    pub coverage: Option<f64>,
    pub covered: usize,
    pub successful: usize,
    pub failed: usize,
    pub mean_ci_length: Option<f64>,
    pub mean_abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub config: SimConfig,
    pub valid: bool,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<FailureRecord>,
}

impl CoverageSummary {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Runs every replication for every requested method. Replications run in
/// parallel; records are reduced in `(rep_index, method)` order.
pub fn run_replications(config: &SimConfig) -> Result<CoverageSummary> {
    config.validate()?;
    let opts = config.pipeline_options();
    let reference = if config.methods.contains(&Method::Proposed) && opts.k == FactorCount::Auto {
        Some(NullReference::compute(config.n, config.p, &opts.parallel_analysis())?)
    } else {
        None
    };

    let per_rep: Vec<Vec<std::result::Result<ReplicationRecord, FailureRecord>>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let fail = |method, e: Error| FailureRecord { method, rep_index: r, error: e.to_string() };
            let data = generate_dataset(config, r);
            config
                .methods
                .iter()
                .map(|&m| {
                    let data = data.as_ref().map_err(|e| fail(m, Error::InvalidState(e.to_string())))?;
                    let out = run_method_with_reference(m, data, config, reference.as_ref()).map_err(|e| fail(m, e))?;
                    let inf = out.inference;
                    Ok(ReplicationRecord {
                        method: m,
                        rep_index: r,
                        theta_tilde: inf.theta_tilde,
                        ci_low: inf.ci_low,
                        ci_high: inf.ci_high,
                        covered: inf.covers(config.theta_star),
                        ci_length: inf.ci_length(),
                        k_selected: out.k_selected,
                    })
                })
                .collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in per_rep.into_iter().flatten() {
        match outcome {
            Ok(rec) => records.push(rec),
            Err(f) => {
                log::warn!("replication {} ({}) failed: {}", f.rep_index, f.method, f.error);
                failures.push(f);
            }
        }
    }

    let mut valid = true;
    let methods = config
        .methods
        .iter()
        .map(|&m| {
            let mine: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == m).collect();
            let failed = failures.iter().filter(|f| f.method == m).count();
            if failed as f64 > MAX_FAILURE_RATE * config.replications as f64 {
                valid = false;
            }
            let successful = mine.len();
            let covered = mine.iter().filter(|r| r.covered).count();
            let mean = |f: &dyn Fn(&ReplicationRecord) -> f64| {
                (successful > 0).then(|| mine.iter().map(|r| f(r)).sum::<f64>() / successful as f64)
            };
            MethodSummary {
                method: m,
                coverage: (successful > 0).then(|| covered as f64 / successful as f64),
                covered,
                successful,
                failed,
                mean_ci_length: mean(&|r| r.ci_length),
                mean_abs_error: mean(&|r| (r.theta_tilde - config.theta_star).abs()),
            }
        })
        .collect();

    Ok(CoverageSummary {
        config: config.clone(),
        valid,
        methods,
        records,
        failures,
    })
}
