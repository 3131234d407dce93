use thiserror::Error;

/// Errors raised across the CMR library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmrError {
    #[error("matrix is not positive definite{0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parameter outside its domain: {0}")]
    Domain(String),

    #[error("every log-weight is -inf or NaN")]
    AllWeightsDegenerate,

    #[error("column {0} has no uncensored entries")]
    ColumnFullyCensored(usize),

    #[error("category {label} is absent from grouping {source_index}")]
    MissingCategory { source_index: usize, label: usize },

    #[error("continuous meta covariate `{0}` has zero variance and cannot be standardized")]
    ConstantContinuousColumn(String),

    #[error("Kronecker MLE does not exist: {0}")]
    Singular(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("column {0} has zero variance")]
    DegenerateColumn(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sampler failed at iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<CmrError>,
    },
}

impl CmrError {
    pub(crate) fn npd(context: &str) -> Self {
        CmrError::NotPositiveDefinite(format!(" ({context})"))
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            CmrError::Sampler { .. } => self,
            other => CmrError::Sampler {
                iteration,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CmrError>;
