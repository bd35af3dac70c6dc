//! Crate-wide error type.
//!
//! Variants map one-to-one onto the failure classes the CLI distinguishes:
//! configuration problems, missing upstream artifacts, incompatible
//! artifacts, and numeric failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a domain bound (damage outside [0,1], environment
    /// outside its box, probability outside (0,1), ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Dimension or length mismatch between related quantities.
    #[error("arity error: {context}: expected {expected}, got {got}")]
    Arity {
        context: String,
        expected: usize,
        got: usize,
    },

    /// Invalid parameter value (non-positive sigma, weights not normalized, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Cholesky or another SPD-requiring routine hit a non-SPD input.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Rejection sampler exceeded its round budget.
    #[error(
        "rejection sampling exhausted after {rounds} rounds \
         (estimated acceptance rate {acceptance_rate:.3e})"
    )]
    RejectionExhausted { rounds: usize, acceptance_rate: f64 },

    /// A NaN or infinity appeared during gradient-taped evaluation.
    #[error("non-finite value produced by operation `{op}`")]
    NonFinite { op: String },

    /// Bad run configuration (unknown key, unparsable value, invalid combination).
    #[error("config error: {0}")]
    Config(String),

    /// A required input artifact (dataset, model file) is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Artifacts exist but do not fit together (family mismatch, stale hash).
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    /// Training diverged or was otherwise aborted.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn arity(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Arity {
            context: context.into(),
            expected,
            got,
        }
    }
}
