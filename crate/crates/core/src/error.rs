use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message} (key `{key}`)")]
    ConfigKey {
        path: PathBuf,
        line: usize,
        key: String,
        message: String,
    },

    #[error("unreachable room: rt60 {rt60_s:.3} s is below the Sabine bound {bound_s:.3} s for this room")]
    UnreachableRt60 { rt60_s: f64, bound_s: f64 },

    #[error("operation not available in inference mode: {0}")]
    InferenceMode(&'static str),

    #[error("training diverged at iteration {iteration} (lr {lr:.3e}, batch {batch_ids:?})")]
    Diverged {
        iteration: usize,
        lr: f64,
        batch_ids: Vec<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape { .. } => "shape",
            Error::Config(_) | Error::ConfigKey { .. } => "config",
            Error::UnreachableRt60 { .. } => "room",
            Error::InferenceMode(_) => "inference_mode",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

pub(crate) fn shape_err<T>(context: &str, expected: &[usize], actual: &[usize]) -> Result<T> {
    Err(Error::Shape {
        context: context.to_string(),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    })
}
