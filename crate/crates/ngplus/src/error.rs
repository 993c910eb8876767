//! Crate-wide error type and result alias.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong, from numeric failures to config parsing.
///
/// The harness maps errors to process exit codes: config and I/O problems
/// exit with 2, numeric or assertion failures during a run exit with 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Input to a symmetric routine deviated from symmetry by more than the
    /// allowed absolute tolerance.
    #[error("matrix is not symmetric (max |A - A^T| entry = {max_dev:e})")]
    NotSymmetric { max_dev: f64 },

    /// Cholesky hit a pivot at or below the relative floor.
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },

    /// Shapes that must agree did not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Iterative routine ran out of its iteration budget.
    #[error("no convergence after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    /// Failure inside one block of a batched solve.
    #[error("block {index}: {source}")]
    Block {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Loss function incompatible with the provided targets.
    #[error("unsupported loss: {0}")]
    UnsupportedLoss(String),

    /// An operation that needs at least one sample received none.
    #[error("empty batch")]
    EmptyBatch,

    /// Per-sample factor shapes disagree with each other or with the model.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A low-rank path requires rank-one per-sample factors.
    #[error("per-sample factors must have a single column, got {kappa}")]
    KappaNotOne { kappa: usize },

    /// Sketch size exceeds the dimension being sampled.
    #[error("sketch size {q} exceeds sampled dimension {max}")]
    SketchTooLarge { q: usize, max: usize },

    /// Block count must divide the partitioned dimension.
    #[error("{count} blocks do not divide dimension {dim}")]
    NotDivisible { count: usize, dim: usize },

    /// A bounded schedule was evaluated past its final epoch.
    #[error("epoch {epoch} exceeds schedule horizon {max_epoch}")]
    HorizonExceeded { epoch: f64, max_epoch: f64 },

    /// Training produced a NaN or infinite loss; the run is aborted.
    #[error("non-finite loss {loss} at iteration {iter}")]
    NonFiniteLoss { iter: usize, loss: f64 },

    /// Structurally valid config with inconsistent contents.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Unknown key (or section) in a config file.
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    /// Config value failed to parse as its declared type.
    #[error("line {line}: key `{key}` expects {expected}, got `{value}`")]
    TypeError {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },

    /// A key with no usable default was absent.
    #[error("missing required key `{key}`")]
    MissingRequired { key: String },

    /// Malformed row in a CSV dataset.
    #[error("csv row {row}: {msg}")]
    ParseError { row: usize, msg: String },

    /// CSV row with the wrong number of fields.
    #[error("csv row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    /// Dataset description that cannot be generated.
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the harness should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownKey { .. }
            | Error::TypeError { .. }
            | Error::MissingRequired { .. }
            | Error::ParseError { .. }
            | Error::RaggedRow { .. }
            | Error::InvalidSpec(_)
            | Error::InvalidConfig(_)
            | Error::Io(_) => 2,
            _ => 1,
        }
    }
}
