use std::fmt;

use thiserror::Error;

/// Pipeline stage an error surfaced in, used to tag errors from [`crate::fit_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Design,
    PreliminaryFit,
    VarianceComponents,
    FinalFit,
    Adjustment,
    Inference,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Design => "design",
            Stage::PreliminaryFit => "preliminary fit",
            Stage::VarianceComponents => "variance components",
            Stage::FinalFit => "final fit",
            Stage::Adjustment => "small-sample adjustment",
            Stage::Inference => "inference",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum RveError {
    #[error("malformed CSV at line {line}: {message}")]
    MalformedCsv { line: usize, message: String },
    #[error("column `{0}` not found in data")]
    MissingColumn(String),
    #[error("empty cell in column `{column}` at line {line}")]
    EmptyCell { column: String, line: usize },
    #[error("non-numeric value `{value}` in numeric column `{column}` at line {line}")]
    NonNumeric {
        column: String,
        line: usize,
        value: String,
    },
    #[error("non-positive sampling variance {value} at line {line}")]
    NonPositiveVariance { line: usize, value: f64 },
    #[error("formula syntax error at position {position}: {message}")]
    SyntaxError { position: usize, message: String },
    #[error("unsupported formula term `{0}`")]
    UnknownTermForm(String),
    #[error("unknown column `{0}` in formula")]
    UnknownColumn(String),
    #[error("column `{0}` must be numeric")]
    NotNumeric(String),
    #[error("model has no coefficients")]
    EmptyDesign,
    #[error("length mismatch: {0} values but {1} group labels")]
    LengthMismatch(usize, usize),
    #[error("design is rank deficient (check coefficients: {})", .0.join(", "))]
    RankDeficientDesign(Vec<String>),
    #[error("cross-product matrix is singular")]
    SingularCrossProduct,
    #[error("moment equations for the variance components are degenerate")]
    DegenerateMoments,
    #[error("too few studies: m = {m} with p = {p} coefficients")]
    TooFewStudies { m: usize, p: usize },
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has a negative eigenvalue {0:e}")]
    NotPositiveSemidefinite(f64),
    #[error("user weights missing")]
    MissingUserWeights,
    #[error("non-positive user weight {value} at row {row}")]
    NonPositiveWeight { row: usize, value: f64 },
    #[error("rho must lie in [0, 1], got {0}")]
    InvalidRho(f64),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("degrees of freedom must be positive, got {0}")]
    InvalidDf(f64),
    #[error("probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("sensitivity analysis requires the correlated effects model")]
    WrongModel,
    #[error("label column `{0}` not found")]
    MissingLabelColumn(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("replication {index} failed: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<RveError>,
    },
    #[error("{stage}: {source}")]
    InStage {
        stage: Stage,
        #[source]
        source: Box<RveError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RveError {
    /// Strips stage and replication wrappers.
    pub fn root(&self) -> &RveError {
        match self {
            RveError::InStage { source, .. } | RveError::Replication { source, .. } => {
                source.root()
            }
            other => other,
        }
    }

    pub(crate) fn at(self, stage: Stage) -> RveError {
        match self {
            e @ RveError::InStage { .. } => e,
            e => RveError::InStage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = RveError> = std::result::Result<T, E>;

/// Attach a pipeline stage to a fallible result.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
