use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at record {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("input contains no data")]
    EmptyInput,

    #[error("degenerate SNP rows (no variation or no observations): {}", .snp_ids.join(", "))]
    DegenerateSnp { snp_ids: Vec<String> },

    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),

    #[error("genotype rows are not standardized: {0}")]
    NotStandardized(String),

    #[error("kinship is not positive semidefinite: min eigenvalue {min_eigenvalue:e}, max eigenvalue {max_eigenvalue:e}")]
    NotPositiveSemidefinite {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("invalid kinship scale {0}: must be positive")]
    InvalidScale(f64),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("improper Wishart prior: {dof} degrees of freedom with dimension {dim} (need dof > dim - 1)")]
    ImproperPrior { dof: f64, dim: usize },

    #[error("observed block of the covariance is singular")]
    SingularBlock,

    #[error("numerical breakdown{}: {detail}", location(*.chain, *.iteration))]
    NumericalBreakdown {
        chain: Option<usize>,
        iteration: Option<usize>,
        detail: String,
    },

    #[error("input contains {0} missing entries; drop or impute them first")]
    MissingData(usize),

    #[error("need at least {needed} draws, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("potential scale reduction needs at least two chains")]
    NeedsMultipleChains,

    #[error("need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("variance components are not identifiable: kinship eigenvalues are all equal")]
    NonIdentifiable,

    #[error("cross-validation fold {0} has no observed values")]
    DegenerateFold(usize),

    #[error("invalid allele frequency range: {0}")]
    InvalidMaf(String),

    #[error("invalid missingness fraction {0}: must lie in [0, 1)")]
    InvalidFraction(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sample ids do not match: {0}")]
    SampleMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(chain: Option<usize>, iteration: Option<usize>) -> String {
    match (chain, iteration) {
        (Some(c), Some(i)) => format!(" in chain {c} at iteration {i}"),
        (None, Some(i)) => format!(" at iteration {i}"),
        (Some(c), None) => format!(" in chain {c}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn breakdown(detail: impl Into<String>) -> Self {
        Error::NumericalBreakdown {
            chain: None,
            iteration: None,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalBreakdown { .. }
                | Error::NotSpd(_)
                | Error::SingularBlock
                | Error::NotPositiveSemidefinite { .. }
        )
    }
}
