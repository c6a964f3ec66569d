use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape or layout violation.
    Shape(String),
    /// Quantization-parameter violation (non-finite input, bad scales, ...).
    Quant(String),
    /// Graph structure violation (cycle, dangling ref, bad schedule, ...).
    Graph(String),
    /// Update-scheme violation (layer out of range, empty mask, ...).
    Scheme(String),
    /// Numeric failure at runtime (NaN loss, accumulator overflow, ...).
    Numeric(String),
    /// Invalid configuration or input file.
    Config(String),
    /// Constrained search has no feasible candidate.
    Infeasible(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Quant(msg) => write!(f, "quantization error: {msg}"),
            Error::Graph(msg) => write!(f, "graph error: {msg}"),
            Error::Scheme(msg) => write!(f, "update-scheme error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Json(err) => write!(f, "json error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Json(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Json(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
