use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents disagree; `dim` names the offending dimension.
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: degenerate batch, {count} values per channel (need at least 2)")]
    DegenerateBatch { op: &'static str, count: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("label {value} out of range for {num_classes} classes at (n={n}, y={y}, x={x})")]
    LabelOutOfRange {
        value: u8,
        num_classes: usize,
        n: usize,
        y: usize,
        x: usize,
    },

    #[error("no scored pixels: {0}")]
    NoScoredPixels(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("extent overflow: {0}")]
    ExtentOverflow(String),

    #[error("malformed document: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::DegenerateBatch { .. } => "degenerate_batch",
            Error::Usage(_) => "usage",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NoScoredPixels(_) => "no_scored_pixels",
            Error::NonFinite(_) => "non_finite",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::ExtentOverflow(_) => "extent_overflow",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
        }
    }
}
