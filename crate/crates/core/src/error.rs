use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimension too small: need {needed} along {axis}, got {got}")]
    DimensionTooSmall {
        axis: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("insufficient visible keypoints: need {needed}, have {have}")]
    InsufficientKeypoints { needed: usize, have: usize },
    #[error("term {0} has no analytic gradient")]
    UnsupportedTerm(&'static str),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("no usable alignment candidate")]
    NoCandidate,
    #[error("insufficient instances: need {needed}, have {have}")]
    InsufficientInstances { needed: usize, have: usize },
    #[error("object is entirely behind the camera")]
    DegenerateCamera,
    #[error("optimization diverged after {0} iterations")]
    Diverged(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionTooSmall { .. } => "dimension_too_small",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyMask => "empty_mask",
            Error::NonPositiveDepth(_) => "non_positive_depth",
            Error::BehindCamera(_) => "behind_camera",
            Error::Degenerate(_) => "degenerate_configuration",
            Error::InsufficientKeypoints { .. } => "insufficient_visible_keypoints",
            Error::UnsupportedTerm(_) => "unsupported_term",
            Error::EmptyCloud => "empty_cloud",
            Error::NoCandidate => "no_candidate",
            Error::InsufficientInstances { .. } => "insufficient_instances",
            Error::DegenerateCamera => "degenerate_camera",
            Error::Diverged(_) => "diverged",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
