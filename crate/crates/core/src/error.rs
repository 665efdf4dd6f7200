//! Error type shared by every module in the crate.
//!
//! Two failure families matter to callers: *validation* errors (bad shapes,
//! empty inputs, out-of-range parameters) and *numerical* errors (non-finite
//! losses, divergent optimization). The CLI maps them to distinct exit codes,
//! so the distinction is part of the public contract.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input failed a precondition (shape mismatch, empty set, bad range).
    #[error("validation error: {0}")]
    Validation(String),

    /// A computation produced a non-finite or otherwise unusable value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// A file had a malformed header or payload.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Convenience constructor for validation failures.
    pub fn validation(msg: impl fmt::Display) -> Self {
        Error::Validation(msg.to_string())
    }

    /// Convenience constructor for numerical failures.
    pub fn numerical(msg: impl fmt::Display) -> Self {
        Error::Numerical(msg.to_string())
    }

    /// Convenience constructor for malformed file contents.
    pub fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_prefixes_distinguish_families() {
        let v = Error::validation("empty batch");
        let n = Error::numerical("loss is NaN");
        assert!(v.to_string().starts_with("validation error:"));
        assert!(n.to_string().starts_with("numerical error:"));
    }

    #[test]
    fn io_errors_convert() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "missing");
        let e: Error = io.into();
        assert!(matches!(e, Error::Io(_)));
    }
}
