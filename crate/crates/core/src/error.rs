use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not positive definite; increase damping")]
    NotPositiveDefinite,

    #[error("index {index} out of range for dimension {bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid group index {index} (partition has {groups} groups)")]
    InvalidGroupIndex { index: usize, groups: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("group {0} is already pruned")]
    GroupAlreadyPruned(usize),

    #[error("group {0} is not pruned")]
    GroupNotPruned(usize),

    /// The inverse block over the changed rows (or its Schur complement) could
    /// not be factored.
    #[error("singular block while updating groups {groups:?}; increase damping")]
    SingularBlock { groups: Vec<usize> },

    #[error("incremental state drifted from direct recompute: {what} deviates by {deviation:e}")]
    Drift { what: &'static str, deviation: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("schedule infeasible: {0}")]
    ScheduleInfeasible(String),

    #[error("{count} subsets exceed enumeration cap {cap}")]
    TooManySubsets { count: u128, cap: u128 },

    #[error("inconsistent update signs: {0}")]
    InconsistentSigns(String),

    #[error("{rows} rows not divisible into {heads} heads")]
    NotDivisible { rows: usize, heads: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite
                | Error::SingularBlock { .. }
                | Error::Drift { .. }
                | Error::InconsistentSigns(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
