use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: first column vanishes or columns are parallel")]
    DegenerateRotation,

    #[error("rotation angle {angle} rad is too close to pi for the principal logarithm")]
    NearPiRotation { angle: f64 },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("sample position ({u}, {v}) is outside the raster")]
    OutOfBounds { u: f64, v: f64 },

    #[error("missing file for `{entry}`: {}", path.display())]
    MissingFile { entry: String, path: PathBuf },

    #[error("dimension mismatch for `{entry}`: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        entry: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("region {0} has no usable pixels")]
    EmptyRegion(u32),

    #[error("degenerate PnP configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("RANSAC found {found} inliers, {required} required")]
    InsufficientInliers { found: usize, required: usize },

    #[error("non-finite loss at iteration {iteration} in term `{term}`")]
    NonFiniteLoss { iteration: usize, term: String },

    #[error("no pixel with valid depth to seed Gaussians")]
    NoValidPixels,

    #[error("Gaussian is behind the near plane (depth {depth})")]
    Clipped { depth: f64 },

    #[error("render intermediates do not match the backward call: {0}")]
    StaleIntermediates(String),

    #[error("region {0} has no motion estimate")]
    UnknownRegion(u32),

    #[error("infeasible synthetic scene: {0}")]
    ConfigInfeasible(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateRotation => "DegenerateRotation",
            Error::NearPiRotation { .. } => "NearPiRotation",
            Error::BehindCamera { .. } => "BehindCamera",
            Error::OutOfBounds { .. } => "OutOfBounds",
            Error::MissingFile { .. } => "MissingFile",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::MalformedManifest(_) => "MalformedManifest",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::CorruptHeader(_) => "CorruptHeader",
            Error::EmptyRegion(_) => "EmptyRegion",
            Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
            Error::InsufficientInliers { .. } => "InsufficientInliers",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::NoValidPixels => "NoValidPixels",
            Error::Clipped { .. } => "Clipped",
            Error::StaleIntermediates(_) => "StaleIntermediates",
            Error::UnknownRegion(_) => "UnknownRegion",
            Error::ConfigInfeasible(_) => "ConfigInfeasible",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Image(_) => "Image",
        }
    }
}
