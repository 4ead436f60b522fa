use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ConstantImage: image has zero intensity variance")]
    ConstantImage,

    #[error("DegenerateTarget: resize target {width}x{height} must be at least 2x2")]
    DegenerateTarget { width: usize, height: usize },

    #[error("DimensionMismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("SliceCountMismatch: expected {expected} slices, got {actual}")]
    SliceCountMismatch { expected: usize, actual: usize },

    #[error("NonFiniteLoss: total loss became non-finite at level {level}, iteration {iteration}")]
    NonFiniteLoss {
        level: usize,
        iteration: usize,
        trace: Vec<crate::losses::LossBreakdown>,
    },

    #[error("LengthMismatch: feature vectors of length {0} and {1}")]
    LengthMismatch(usize, usize),

    #[error("NOutOfRange: requested {n} atlases from a set of {available}")]
    NOutOfRange { n: usize, available: usize },

    #[error("AllZeroOverlap: every raw fusion weight is zero")]
    AllZeroOverlap,

    #[error("EmptyReference: reference volume has no foreground")]
    EmptyReference,

    #[error("EmptyMask: Hausdorff distance needs non-empty masks")]
    EmptyMask,

    #[error("TooFewSlices: need at least 3 slices, got {0}")]
    TooFewSlices(usize),

    #[error("InvalidParams: {0}")]
    InvalidParams(String),

    #[error("InvalidData: {0}")]
    InvalidData(String),

    #[error("Format: {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("Io: {0}")]
    Io(#[from] std::io::Error),

    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short variant name, used by frontends when reporting failures.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ConstantImage => "ConstantImage",
            Error::DegenerateTarget { .. } => "DegenerateTarget",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::SliceCountMismatch { .. } => "SliceCountMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::NOutOfRange { .. } => "NOutOfRange",
            Error::AllZeroOverlap => "AllZeroOverlap",
            Error::EmptyReference => "EmptyReference",
            Error::EmptyMask => "EmptyMask",
            Error::TooFewSlices(_) => "TooFewSlices",
            Error::InvalidParams(_) => "InvalidParams",
            Error::InvalidData(_) => "InvalidData",
            Error::Format { .. } => "Format",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
