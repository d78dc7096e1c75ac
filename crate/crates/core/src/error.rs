use diffkit::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZigmaError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("scan: {0}")]
    Scan(#[from] crate::scan::ScanError),
    #[error("unsupported variant {variant} for {family} (valid: 0..{count})")]
    UnsupportedVariant {
        family: &'static str,
        variant: usize,
        count: usize,
    },
    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at position {position} in {context}")]
    NonFinite { context: &'static str, position: usize },
    #[error("time {t} outside {range}")]
    TimeOutOfRange { t: f64, range: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = std::result::Result<T, ZigmaError>;
