//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A volume grid or transform is geometrically invalid for the operation.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// An input value violates a precondition (NaN voxels, missing data, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A scalar parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An operation received degenerate data it cannot meaningfully process.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Tensor shapes do not line up; both shapes are named.
    #[error("shape error: {0}")]
    Shape(String),

    /// A file does not match the expected on-disk format.
    #[error("format error at byte offset {offset} in {path:?}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Registration could not find enough overlapping samples.
    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),

    /// Registration failed to run.
    #[error("registration error: {0}")]
    Registration(String),

    /// A network input configuration cannot be satisfied by the case.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value appeared where the numerics require finite data.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Statistical test cannot be computed on this data.
    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    /// Summary requested on an empty value list.
    #[error("summary error: {0}")]
    Summary(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
