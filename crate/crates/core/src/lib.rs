//! Debiased inference for one coefficient of a high-dimensional generalized
//! linear model whose response and covariates share unmeasured confounders.
//!
//! Confounders are recovered from the covariates by a diagonal-noise factor
//! model, entered as unpenalized surrogates in an ℓ1-penalized fit, and the
//! exposure coefficient is then corrected with a decorrelated score.

mod active_set;
pub mod cv;
pub mod error;
pub mod factor;
pub mod family;
pub mod glm;
pub mod inference;
pub mod lasso;
pub mod normal;
pub mod parallel_analysis;
pub mod pipeline;
pub mod projection;
pub mod seed;
pub mod simulation;

pub use error::{Error, Result, Stage};
pub use family::GlmFamily;
pub use glm::{Coefficients, Dataset, Design};
pub use inference::{InferenceResult, ScoreMode};
pub use pipeline::{full_pipeline, FactorCount, PipelineOptions, PipelineOutput};
