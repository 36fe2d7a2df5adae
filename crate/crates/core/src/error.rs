use thiserror::Error;

/// Unified error type for the toolkit.
///
/// Every variant renders as `<category>: <detail>` so front ends can emit a
/// single machine-parsable line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape: {0}")]
    Shape(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("format: {0}")]
    Format(String),
    #[error("corruption: {0}")]
    Corruption(String),
    #[error("training: {0}")]
    Training(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Validation(_) => "validation",
            Error::Domain(_) => "domain",
            Error::Format(_) => "format",
            Error::Corruption(_) => "corruption",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
