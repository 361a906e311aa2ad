use thiserror::Error;

/// Error type shared by all simulation and training modules.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or infeasible request.
    #[error("config: {0}")]
    Config(String),

    /// Shape or dimension mismatch between related objects.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Numeric failure that the caller may want to inspect.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Non-finite value where a finite one is required.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Iterative design failed to converge; carries the last iterate info.
    #[error("no convergence after {iters} iterations (last delta {last_delta:.3e})")]
    Convergence { iters: usize, last_delta: f64 },

    /// Token layout version or shape disagreement between model and data.
    #[error("layout mismatch: {0}")]
    Layout(String),

    /// Training diverged (NaN loss).
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Machine-parsable category tag, used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dim(_) => "dim",
            Error::Numeric(_) => "numeric",
            Error::NonFinite(_) => "non-finite",
            Error::Convergence { .. } => "convergence",
            Error::Layout(_) => "layout",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
