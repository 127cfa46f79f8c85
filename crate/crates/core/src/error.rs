use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout {layout} needs an even token count, got m = {m}")]
    OddSplit { layout: crate::prompt::Layout, m: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate text feature: pre-normalization norm {norm:e} is below 1e-12")]
    DegenerateFeature { norm: f64 },

    #[error("normalization contract violated: {what} has norm {norm} (expected 1 within 1e-9)")]
    NotUnitNorm { what: String, norm: f64 },

    #[error("setup error: {0}")]
    Setup(String),

    #[error("cell (class {class}, domain {domain}) has {available} records, {requested} requested")]
    InsufficientData {
        class: String,
        domain: String,
        available: usize,
        requested: usize,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the stage that produced it.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Feature-file corruption classes. Each is reported before any record is returned.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"DCF1\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found}, expected 1")]
    UnsupportedVersion { found: u32 },

    #[error("truncated payload: header promises {expected} bytes, file has {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("dimension mismatch: header says D = {header}, manifest says {manifest}")]
    DimMismatch { header: u32, manifest: usize },

    #[error("count mismatch in {field}: header says {header}, found {found}")]
    CountMismatch {
        field: &'static str,
        header: usize,
        found: usize,
    },

    #[error("record {record}: {field} {value} is out of the declared range 0..{limit}")]
    IdOutOfRange {
        record: usize,
        field: &'static str,
        value: u32,
        limit: u32,
    },

    #[error("manifest invalid: {0}")]
    Manifest(String),
}
