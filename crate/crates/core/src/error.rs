use thiserror::Error;

/// Errors raised across the solver, model and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("SVD did not converge after {iterations} sweeps")]
    SvdNoConvergence { iterations: usize },

    #[error("infeasible marginals: total masses differ by {gap:e}")]
    InfeasibleMarginals { gap: f64 },

    #[error("invalid mass vector: {reason}")]
    InvalidMass { reason: String },

    #[error("network simplex exceeded {pivots} pivots")]
    SimplexPivotLimit { pivots: usize },

    #[error("oracle guard: {what} of size {size} exceeds limit {limit}")]
    OracleTooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("Sinkhorn scaling underflowed at epsilon={epsilon:e}; increase epsilon or use the log-domain solver")]
    SinkhornUnderflow { epsilon: f64 },

    #[error("plan violates marginals by {violation:e}")]
    InfeasiblePlan { violation: f64 },

    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("tape was recorded against parameter generation {tape}, network is at {current}")]
    StaleTape { tape: u64, current: u64 },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("non-finite loss component `{component}`")]
    NonFiniteLoss { component: &'static str },

    #[error("empty data split `{split}`")]
    EmptySplit { split: &'static str },

    #[error("treatment group {group} is empty")]
    EmptyGroup { group: u8 },

    #[error("cannot stratify: {reason}")]
    StratificationInfeasible { reason: String },

    #[error("head for treatment group {group} has no training units")]
    UntrainedHead { group: u8 },

    #[error("{what} is unavailable")]
    Unavailable { what: String },

    #[error("csv parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
