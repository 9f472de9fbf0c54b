//! Unified error type and process exit-code policy.
//!
//! Every failure is classified as either a *user* error (bad flags, missing
//! files, malformed config or data — exit code 1) or an *internal* error
//! (tensor runtime failures, non-finite losses — exit code 2). Success is 0.

use decloud_core::CoreError;

/// Exit code for user-correctable errors.
pub const EXIT_USER: i32 = 1;
/// Exit code for internal failures.
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),
    /// Invalid command-line usage beyond what argument parsing catches.
    #[error("usage error: {0}")]
    Usage(String),
    /// Dataset problems: missing directories, malformed manifests, band mismatches.
    #[error("data error: {0}")]
    Data(String),
    /// A command needs an artifact another command has not produced yet.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Numeric-contract violation from the core crate.
    #[error("numeric error: {0}")]
    Core(#[from] CoreError),
    /// Tensor runtime failure.
    #[error("tensor error: {0}")]
    Candle(#[from] candle_core::Error),
    /// Training diverged.
    #[error("non-finite loss at iteration {iteration} of stage {stage}")]
    NonFiniteLoss { stage: String, iteration: usize },
    /// Anything else that indicates a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Attach a path to an `std::io::Error`.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Data(_)
            | Error::MissingPrerequisite(_)
            | Error::Io { .. }
            | Error::Core(_) => EXIT_USER,
            Error::Candle(_) | Error::NonFiniteLoss { .. } | Error::Internal(_) => EXIT_INTERNAL,
        }
    }
}
