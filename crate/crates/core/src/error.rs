use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },

    #[error("truncated {0} file")]
    Truncated(&'static str),

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("record {image_id}: {reason}")]
    InvalidRecord { image_id: u64, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("k-means: {0}")]
    KMeans(String),

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("class {0} has no instance graphs")]
    EmptyClass(usize),

    #[error("class index collision: class {0} already present in the atlas")]
    ClassCollision(usize),

    #[error("vocabulary fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("ingredient {ingredient} out of range for vocabulary of size {vocab_size}")]
    IngredientOutOfRange { ingredient: usize, vocab_size: usize },

    #[error("configuration mismatch: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::InvalidHeader(_) => "invalid_header",
            Error::InvalidRecord { .. } => "invalid_record",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::KMeans(_) => "kmeans",
            Error::DegenerateGraph(_) => "degenerate_graph",
            Error::EmptyClass(_) => "empty_class",
            Error::ClassCollision(_) => "class_collision",
            Error::FingerprintMismatch(_) => "fingerprint_mismatch",
            Error::IngredientOutOfRange { .. } => "ingredient_out_of_range",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
