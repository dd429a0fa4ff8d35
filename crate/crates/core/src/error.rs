use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("bad value {value:?} in column `{column}` (line {line}): {reason}")]
    BadValue {
        line: usize,
        column: String,
        value: String,
        reason: String,
    },

    #[error("arm {arm} has no records")]
    EmptyArm { arm: u8 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        /// Best iterate reached before giving up, when one exists.
        best: Option<Vec<f64>>,
    },

    #[error("design matrix is rank deficient: {0}")]
    RankDeficientDesign(String),

    #[error("degenerate arm: {0}")]
    DegenerateArm(String),

    #[error("record {index} on arm {arm} has no post-treatment covariates")]
    MissingL { index: usize, arm: u8 },

    #[error("arm {arm} has no non-switchers")]
    AllSwitchers { arm: u8 },

    #[error("influence-function standard errors require untruncated weights")]
    TruncationUnsupported,

    #[error("influence function unavailable: {0}")]
    InfluenceUnavailable(String),

    #[error("{failed} of {requested} bootstrap replicates failed")]
    TooManyFailures { failed: usize, requested: usize },

    #[error("principal stratum S0 = S1 = 0 is empty")]
    EmptyStratum,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the estimation machinery itself (as opposed to bad
    /// input), which the replication harness counts rather than propagates.
    pub fn is_estimation_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::RankDeficientDesign(_)
                | Error::DegenerateArm(_)
                | Error::AllSwitchers { .. }
                | Error::EmptyArm { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
