use std::path::PathBuf;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to parse `{field}`: {msg}")]
    Parse { field: String, msg: String },

    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    Dimension {
        field: String,
        expected: String,
        found: String,
    },

    #[error("invariant violated for `{field}`: {msg}")]
    Invariant { field: String, msg: String },

    #[error("unsupported format_version {found} (expected {expected})")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("vertex {vertex} has nonpositive depth z = {z}")]
    NonPositiveDepth { vertex: usize, z: f64 },

    #[error("contour is empty: the mask has no foreground pixels")]
    EmptyContour,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("ground truth is required in full supervision mode")]
    MissingGroundTruth,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(field: &str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            field: field.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invariant(field: &str, msg: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.to_string(),
            msg: msg.into(),
        }
    }
}
