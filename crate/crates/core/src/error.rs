//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A file failed to parse (bad header, bad JSON, truncated body).
    #[error("format error: {0}")]
    Format(String),
    /// Parsed data violates a documented invariant.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A caller-supplied argument is out of range or inconsistent.
    #[error("argument error: {0}")]
    Argument(String),
    /// The experiment configuration is invalid or incomplete.
    #[error("config error: {0}")]
    Config(String),
    /// Tensor/layer shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// An event or index falls outside its container.
    #[error("bounds error: {0}")]
    Bounds(String),
    /// Window sampling could not satisfy its constraints.
    #[error("sampling error: {0}")]
    Sampling(String),
    /// The training loop failed (e.g. divergence).
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind, also used to derive the process exit code.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Integrity(_) => "integrity",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Bounds(_) => "bounds",
            Error::Sampling(_) => "sampling",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
        }
    }

    /// Exit code table (documented in the README).
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "format" => 3,
            "integrity" => 4,
            "argument" => 5,
            "training" => 6,
            "io" => 7,
            "sampling" => 8,
            _ => 1,
        }
    }
}
