use std::path::PathBuf;

use thiserror::Error;

use crate::catalog::{BundleId, ItemId};

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("exponent must be positive, got {0}")]
    NonPositiveExponent(f64),

    #[error("CPT curvature must lie in (0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown item {0}")]
    UnknownItem(ItemId),

    #[error("unknown bundle {0}")]
    UnknownBundle(BundleId),

    #[error("bundle {0} has fewer than two items")]
    BundleTooSmall(BundleId),

    #[error("main item {item} is not a member of bundle {bundle}")]
    MainItemNotInBundle { item: ItemId, bundle: BundleId },

    /// The record violates `c_m < c_B < c_m + c_v`. Callers skip such records.
    #[error("price assumption violated: c_m={c_m}, c_v={c_v}, c_B={c_b}")]
    PriceAssumption { c_m: f64, c_v: f64, c_b: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("value {value} lies within {tolerance} of the singular point {singular}")]
    Singular {
        value: f64,
        singular: f64,
        tolerance: f64,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("catalog validation failed: {0}")]
    Validation(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
