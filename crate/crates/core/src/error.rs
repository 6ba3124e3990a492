//! Error types shared by every module in the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An index (class label, channel, node id) is out of range.
    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A configuration value fails validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation produced NaN or infinity. `step` is set when the failure
    /// happened inside an iterative optimization.
    #[error("non-finite value in {op}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { op: &'static str, step: Option<usize> },

    /// A text input (manifest, score file, config echo) failed to parse.
    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    /// A binary input (PPM image, checkpoint) failed to decode.
    #[error("decode error in {path} at byte {offset}: {detail}")]
    Decode {
        path: String,
        offset: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
