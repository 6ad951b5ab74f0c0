use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: input outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("sampler diverged at step {step}")]
    SamplerDivergence { step: usize },
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: usize },
    #[error("teacher quality gate failed: k-NN accuracy {accuracy:.4} <= {threshold}")]
    TeacherQuality { accuracy: f64, threshold: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
