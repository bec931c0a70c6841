use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("category {0} has no pixels in the label map")]
    AbsentCategory(u8),
    #[error("every pixel in the label map is ignored")]
    AllIgnored,
    #[error("point set is empty")]
    EmptySet,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("image {0} has no matching label file")]
    MissingPair(PathBuf),
    #[error("label {label} in {path} is outside 0..{num_categories} and is not the ignore id")]
    LabelOutOfRange {
        path: PathBuf,
        label: u8,
        num_categories: usize,
    },
    #[error("training diverged at step {step}: total loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
