//! Crate-wide error type and result alias.

use std::io;
use thiserror::Error;

/// Every failure mode the engine can report.
///
/// The variants are grouped by who is at fault: [`Error::Config`],
/// [`Error::InvalidInput`], and [`Error::Parse`] point at the caller or their
/// files; [`Error::Backend`] and [`Error::Protocol`] point at a remote model
/// server; the remaining variants describe states the engine refuses to
/// proceed from.
#[derive(Debug, Error)]
pub enum Error {
    /// Static configuration is unusable (bad sizes, out-of-range parameters,
    /// unknown keys, inconsistent combinations).
    #[error("config error: {0}")]
    Config(String),

    /// An argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The unmasking schedule ran out of steps while masks remain.
    #[error("schedule exhausted: {masks_remaining} mask(s) remain with no steps left")]
    ScheduleExhausted { masks_remaining: usize },

    /// A prediction or scoring backend could not be reached or kept failing.
    #[error("backend error after {attempts} attempt(s): {message}")]
    Backend { message: String, attempts: u32 },

    /// A remote backend answered, but with a payload we cannot interpret.
    #[error("protocol error: {message}; raw payload: {payload}")]
    Protocol { message: String, payload: String },

    /// A brute-force enumeration would exceed its configured cap.
    #[error("capacity exceeded: {needed:.3e} branches > cap {cap}; shrink the config")]
    CapacityExceeded { needed: f64, cap: u64 },

    /// Every particle carries zero weight; nothing can be normalized.
    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    /// A path-measure evaluation hit a zero denominator.
    #[error("degenerate path: {0}")]
    DegeneratePath(String),

    /// A persisted artifact (trace, config, chain spec) failed to parse.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Underlying file-system failure.
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Shorthand for [`Error::Config`] from anything displayable.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for [`Error::InvalidInput`] from anything displayable.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
