use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The weight matrix does not describe a DAG.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("rank-deficient regressors: columns {columns:?} are linearly dependent on the others")]
    RankDeficient { columns: Vec<usize> },

    #[error("degenerate covariance: {0}")]
    Degenerate(String),

    #[error("insufficient samples: got {got}, need at least {need}")]
    SampleSize { got: usize, need: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },
}

impl Error {
    /// True for failures of the numerics (singular systems, divergence) as
    /// opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        if let Error::Context { source, .. } = self {
            return source.is_numeric();
        }
        matches!(
            self,
            Error::Singular(_)
                | Error::Numeric(_)
                | Error::Degenerate(_)
                | Error::RankDeficient { .. }
        )
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
