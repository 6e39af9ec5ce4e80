use thiserror::Error;

/// Errors raised by model construction, fitting, and I/O.
#[derive(Debug, Error)]
pub enum GlmmError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("hyperparameter out of domain: {0}")]
    Domain(String),

    #[error("matrix `{what}` is not positive definite (first failing pivot at index {pivot})")]
    NotPositiveDefinite { what: &'static str, pivot: usize },

    #[error("{what} did not converge after {iterations} iterations (last change {last_change:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        last_change: f64,
    },

    #[error("step-halving could not find an admissible step after {halvings} halvings")]
    StepFailure { halvings: usize },

    #[error("singular matrix `{what}`: {detail}")]
    Singular { what: &'static str, detail: String },

    #[error("quadrature budget exceeded: {nodes} nodes requested, budget {budget}")]
    Budget { nodes: u128, budget: u128 },

    #[error("all {count} starts failed; first error: {first}")]
    StartsFailed { count: usize, first: Box<GlmmError> },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("data error at row {row}, column `{column}`: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GlmmError {
    /// True for failures of the numerics rather than of the user's input.
    pub fn is_numerical(&self) -> bool {
        if let GlmmError::StartsFailed { first, .. } = self {
            return first.is_numerical();
        }
        matches!(
            self,
            GlmmError::NotPositiveDefinite { .. }
                | GlmmError::NonConvergence { .. }
                | GlmmError::StepFailure { .. }
                | GlmmError::Singular { .. }
                | GlmmError::Budget { .. }
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GlmmError::Invalid(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        GlmmError::Domain(msg.into())
    }
}

pub type Result<T, E = GlmmError> = std::result::Result<T, E>;
