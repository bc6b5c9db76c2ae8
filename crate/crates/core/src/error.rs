use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("annotation XML: {0}")]
    Xml(String),

    #[error("unknown label group {name:?}; known labels: {}", known.join(", "))]
    UnknownLabel { name: String, known: Vec<String> },

    #[error("label table: {0}")]
    LabelTable(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Geometry(String),

    #[error("image: {0}")]
    Image(String),

    #[error("{0}")]
    Format(String),

    #[error("non-finite value row {row}")]
    NonFinite { row: usize },

    #[error("dim mismatch: got {got}, atlas {expected}")]
    DimMismatch { got: usize, expected: usize },

    #[error("k out of range: k={k}, valid range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("label {label_id} (row {row}) missing from label table")]
    MissingLabel { label_id: u32, row: usize },

    #[error("zero vector row {row}")]
    ZeroVector { row: usize },

    #[error("extractor: {0}")]
    Extractor(String),

    /// `ids` holds at most the first 20 shared ids; `count` is the total.
    #[error("test/atlas overlap: {count} shared patch id(s): {}", ids.join(", "))]
    Overlap { count: usize, ids: Vec<String> },

    #[error("{0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the environment (files, network) rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Extractor(_))
    }
}
