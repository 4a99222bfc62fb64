//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a documented invariant (bad config, malformed
    /// distribution, contract violation in a scoring call).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An API was called in a state that does not permit it, e.g. feeding
    /// a segmenter after `finalize`.
    #[error("usage error: {0}")]
    Usage(String),

    /// Configuration problem: unknown profile, missing file, missing
    /// endpoint capability. CLI maps these to exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// The endpoint cannot supply something the session requires
    /// (typically token logprobs).
    #[error("endpoint missing required capability: {0}")]
    MissingCapability(String),

    /// Driver failure while a session was in flight.
    #[error("driver error{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Driver {
        message: String,
        /// Step index the session was working on, when known.
        step: Option<usize>,
        /// Whether retrying the same call may succeed.
        retryable: bool,
    },

    /// Replay file failed to parse or validate.
    #[error("replay file {path}:{line}: {message}")]
    ReplayFormat {
        path: String,
        line: usize,
        message: String,
    },

    /// Compression rate was requested but no vanilla baseline is available.
    #[error("compression rate requested but no vanilla baseline was provided for this set")]
    MissingVanillaBaseline,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// An input that violates a documented invariant.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// An API call made in a state that does not permit it.
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// A configuration problem (unknown profile, missing file, bad flag).
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// A driver failure, optionally tied to a step and marked retryable.
    pub fn driver(message: impl Into<String>, step: Option<usize>, retryable: bool) -> Self {
        Error::Driver {
            message: message.into(),
            step,
            retryable,
        }
    }

    /// Attaches a step index to a driver error that lacks one.
    pub(crate) fn with_step(self, step_index: usize) -> Self {
        match self {
            Error::Driver {
                message,
                step: None,
                retryable,
            } => Error::Driver {
                message,
                step: Some(step_index),
                retryable,
            },
            other => other,
        }
    }

    /// True for errors the CLI reports as configuration problems (exit 2).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingCapability(_)
                | Error::ReplayFormat { .. }
                | Error::InvalidInput(_)
        )
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
