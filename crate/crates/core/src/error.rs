use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Running statistics used before they exist, or similar misuse of layer state.
    #[error("state error: {0}")]
    State(String),

    /// A configuration field failed validation. `field` is a dotted path such as `norm.tau`.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A caller broke an API contract (stale cache, duplicate epoch, mismatched gradient shape).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training loss stopped being finite.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
