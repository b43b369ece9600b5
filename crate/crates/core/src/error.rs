use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simulation diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("filter design error: {0}")]
    FilterDesign(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit-code class: true for validation/usage errors, false for
    /// runtime failures (I/O, divergence, corruption).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Diverged(_) | Error::Checksum(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
