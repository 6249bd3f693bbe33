//! Library-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed tensor file or checkpoint; `offset` is the byte where
    /// parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The finite-difference oracle evaluated the probed function to a
    /// non-finite value while perturbing the given coordinate.
    #[error("gradient oracle failure: non-finite evaluation at index {index}")]
    OracleFailure { index: usize },

    /// Training aborted on a non-finite loss; `detail` names the first
    /// offending parameter block when one can be identified.
    #[error("non-finite loss at iteration {iteration} ({detail})")]
    NonFiniteLoss { iteration: u64, detail: String },

    /// A backward pass was handed a cache built against different parameters.
    #[error("stale forward cache: parameters changed since the cache was built")]
    StaleCache,

    /// Evaluation protocol violation (e.g. a probe with no gallery match).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
