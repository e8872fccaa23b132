use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an input or configuration value was violated.
    #[error("invalid input: {0}")]
    Validation(String),

    /// The backend cannot provide what was asked for (e.g. logprobs).
    #[error("capability not supported: {0}")]
    Capability(String),

    /// Network-level failure that survived the retry budget.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// Terminal HTTP status (4xx) from an endpoint.
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },

    /// The endpoint answered but the payload did not have the expected shape.
    #[error("malformed response: {0}")]
    Protocol(String),

    #[error("all {0} branch(es) failed: {1}")]
    AllBranchesFailed(usize, String),

    /// A statistic is undefined for the given data (e.g. zero variance).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            Error::Transport { .. } => true,
            Error::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}
