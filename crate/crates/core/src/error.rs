use std::fmt;

/// Pipeline stage that produced an error, used to tag propagated failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SelectK,
    FactorFit,
    Rotation,
    Confounders,
    LambdaCv,
    Lasso,
    LambdaPrimeCv,
    Projection,
    Debias,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::SelectK => "select_k",
            Stage::FactorFit => "fit_em",
            Stage::Rotation => "rotate_canonical",
            Stage::Confounders => "estimate_confounders",
            Stage::LambdaCv => "cross_validate_lambda",
            Stage::Lasso => "fit_lasso",
            Stage::LambdaPrimeCv => "cross_validate_lambda_prime",
            Stage::Projection => "fit_w",
            Stage::Debias => "debias",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("response invalid for {family} family: {detail}")]
    InvalidResponse { family: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("degenerate partial information {0:e}; no interval produced")]
    DegenerateInformation(f64),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps `self` with the pipeline stage it came from.
    pub fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
