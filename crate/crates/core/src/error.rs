use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: wrong dimensions, violated parameter invariant, bad schema.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular matrix: pivot {pivot:e} below tolerance {tolerance:e}")]
    Singular { pivot: f64, tolerance: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// An internal invariant that should hold by construction was violated.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    /// A structural property (monotonicity, superadditivity) failed at a
    /// specific stage and state.
    #[error("structural property `{property}` violated at stage {stage}, state {state}: {detail}")]
    Structural {
        property: &'static str,
        stage: usize,
        state: usize,
        detail: String,
    },

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
