use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("degenerate covariance in outlier unit {unit}")]
    DegenerateCovariance { unit: usize },

    /// Every responsibility of some unit is zero; the trainer treats this as
    /// the trivial all-outlier solution.
    #[error("all samples classified as outliers in unit {unit}")]
    AllOutliers { unit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors raised by the numerics rather than by inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteLoss(_)
                | Error::DegenerateCovariance { .. }
                | Error::AllOutliers { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Json(_) | Error::Format(_))
    }
}
