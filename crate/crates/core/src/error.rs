use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("backward requires a scalar root, got shape {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("zero-norm embedding at row {row}; cosine similarity is undefined")]
    ZeroNorm { row: usize },

    #[error("non-finite loss at step {step} while training {stage}")]
    Divergence { stage: &'static str, step: usize },

    #[error("Lipschitz certificate failed: layer {layer} of block {block} has sigma {sigma} >= 1")]
    Certificate { block: usize, layer: usize, sigma: f64 },

    #[error("theorem hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}
