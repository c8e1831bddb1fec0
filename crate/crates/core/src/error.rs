use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("loss is not attached to any grad-enabled input")]
    MissingTape,
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("function is not deterministic: two evaluations differ ({0} vs {1})")]
    Determinism(f64, f64),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
