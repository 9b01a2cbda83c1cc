use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "sinkhorn did not converge after {iterations} iterations \
         (best marginal violation {best_violation:.3e}, tolerance {tolerance:.3e})"
    )]
    Convergence {
        iterations: usize,
        best_violation: f64,
        best_iteration: usize,
        tolerance: f64,
    },

    #[error("numerical instability: {0}")]
    Instability(String),

    #[error("degenerate transport plan: {0}")]
    DegeneratePlan(String),

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("cannot normalise: {0}")]
    Normalization(String),

    #[error("sample-bias precondition: {0}")]
    SampleBias(String),

    #[error("insufficient data: {0}")]
    Capacity(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

impl Error {
    /// Stable machine-readable tag, used in structured error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Precondition(_) => "precondition",
            Error::Convergence { .. } => "convergence",
            Error::Instability(_) => "instability",
            Error::DegeneratePlan(_) => "degenerate-plan",
            Error::DegenerateClustering(_) => "degenerate-clustering",
            Error::MetricUndefined(_) => "metric-undefined",
            Error::Normalization(_) => "normalization",
            Error::SampleBias(_) => "sample-bias",
            Error::Capacity(_) => "capacity",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Context { source, .. } => source.kind(),
        }
    }

    /// Wraps the error with a short description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, skipping context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }
}
