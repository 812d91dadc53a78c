use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("format or version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt weights: {0}")]
    CorruptWeights(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("duplicate identifier: {0}")]
    Duplicate(String),
    #[error("unknown identifier: {0}")]
    Unknown(String),
    #[error("weights not loaded for extractor `{0}`")]
    WeightsMissing(String),
    #[error("extractor mismatch: expected `{expected}`, got `{found}`")]
    ExtractorMismatch { expected: String, found: String },
    #[error("degenerate image: {0}")]
    DegenerateImage(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("faceness oracle failed: {0}")]
    Oracle(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss term `{term}` failed: {source}")]
    Term {
        term: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable numeric code, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::MissingFile(_) => 1,
            Error::VersionMismatch(_) => 2,
            Error::CorruptWeights(_) => 3,
            Error::ShapeMismatch(_) => 4,
            Error::NonFinite(_) => 5,
            Error::Precondition(_) => 6,
            Error::Duplicate(_) => 7,
            Error::Unknown(_) => 8,
            Error::WeightsMissing(_) => 9,
            Error::ExtractorMismatch { .. } => 10,
            Error::DegenerateImage(_) => 11,
            Error::Divergence(_) => 12,
            Error::Oracle(_) => 13,
            Error::Data(_) => 14,
            Error::Config(_) => 15,
            Error::Term { source, .. } => source.code(),
            Error::Io(_) => 16,
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) | Error::Unknown(_) => 1,
            Error::NonFinite(_) | Error::Divergence(_) => 3,
            Error::Term { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
