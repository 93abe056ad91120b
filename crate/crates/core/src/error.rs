use thiserror::Error;

use crate::model::PartTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not a rotation (orthogonality error {orthogonality_error:.3e}, det {determinant:.6})")]
    NotARotation {
        orthogonality_error: f64,
        determinant: f64,
    },

    #[error("joint index {index} out of range for {count} joints")]
    BadIndex { index: usize, count: usize },

    #[error("model has no joints tagged {0:?}")]
    MissingPart(PartTag),

    #[error("expression has {got} coefficients, at least {need} required")]
    TooShort { got: usize, need: usize },

    #[error("fit needs 2D keypoints or at least one hand estimate")]
    NoEvidence,

    #[error("cost became non-finite during {stage}")]
    NonFinite { stage: &'static str },

    #[error("projected arm length {length:.3e} is too small")]
    DegenerateArm { length: f64 },

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable category, used by the CLI for error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NotARotation { .. } => "not_a_rotation",
            Error::BadIndex { .. } => "bad_index",
            Error::MissingPart(_) => "missing_part",
            Error::TooShort { .. } => "too_short",
            Error::NoEvidence => "no_evidence",
            Error::NonFinite { .. } => "non_finite",
            Error::DegenerateArm { .. } => "degenerate_arm",
            Error::Degenerate(_) => "degenerate",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidInput(_) => "invalid_input",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
