use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("state error: {0}")]
    State(String),

    #[error("interval error: t={t}, r={r}")]
    Interval { t: f64, r: f64 },

    #[error("numerical error in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("metric failure: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by non-finite values during training or sampling.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}
