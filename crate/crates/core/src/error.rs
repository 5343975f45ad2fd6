use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// `Structural` covers malformed inputs (shape mismatches, bad counts,
/// violated preconditions); `Numerical` covers algorithms that ran on valid
/// input but failed to produce a trustworthy answer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("manifest {}, line {line}: {kind}", path.display())]
    Manifest {
        path: PathBuf,
        line: u64,
        kind: ManifestError,
    },

    #[error("identity `{identity}` appears in both the {first} and {second} splits")]
    SplitOverlap {
        identity: String,
        first: String,
        second: String,
    },

    #[error("invalid model file: {0}")]
    ModelFormat(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The distinct ways a manifest row can be rejected.
#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("no entries")]
    NoEntries,
    #[error("malformed csv: {0}")]
    Malformed(String),
    #[error("unknown split `{0}` (expected world, dev or eval)")]
    UnknownSplit(String),
    #[error("image {} not found", .0.display())]
    MissingImage(PathBuf),
    #[error("image {}: {reason}", path.display())]
    BadImage { path: PathBuf, reason: String },
    #[error("image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_structural(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::Io { .. })
    }
}
