use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("transform is not invertible (determinant {0})")]
    SingularTransform(f64),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("unexpected geometry type: expected {expected}, found {found}")]
    GeometryType { expected: &'static str, found: String },
    #[error("raster shape {0:?} has no pixels")]
    EmptyShape((usize, usize)),
    #[error("polygon ring is not closed")]
    UnclosedRing,
    #[error("raster has {found} bands; band {band} is required")]
    MissingBand { band: &'static str, found: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("transforms differ between inputs")]
    TransformMismatch,
    #[error("raster {raster:?} is smaller than chip size {chip_size}")]
    RasterSmallerThanChip { raster: (usize, usize), chip_size: usize },
    #[error("class value {0} is outside 0..=4")]
    InvalidClassValue(u8),
    #[error("inputs are not aligned: {0}")]
    Alignment(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("spatial dims {h}x{w} are not divisible by {factor}")]
    BadSpatialDims { h: usize, w: usize, factor: usize },
    #[error("loss became non-finite at epoch {epoch}; last good checkpoint: {checkpoint:?}")]
    DivergedLoss { epoch: usize, checkpoint: Option<PathBuf> },
    #[error("chip indices differ between inputs")]
    IndexMismatch,
    #[error("chip at ({row_off}, {col_off}) with size {size} exceeds mosaic {shape:?}")]
    ChipOutOfBounds { row_off: usize, col_off: usize, size: usize, shape: (usize, usize) },
    #[error("scene spec too small: {0}")]
    SpecTooSmall(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed file {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tiff(#[from] tiff::TiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    GeoJson(#[from] geojson::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case tag of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SingularTransform(_) => "singular_transform",
            Error::InvalidTransform(_) => "invalid_transform",
            Error::GeometryType { .. } => "geometry_type",
            Error::EmptyShape(_) => "empty_shape",
            Error::UnclosedRing => "unclosed_ring",
            Error::MissingBand { .. } => "missing_band",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::TransformMismatch => "transform_mismatch",
            Error::RasterSmallerThanChip { .. } => "raster_smaller_than_chip",
            Error::InvalidClassValue(_) => "invalid_class_value",
            Error::Alignment(_) => "alignment",
            Error::EmptyDataset => "empty_dataset",
            Error::UnknownArchitecture(_) => "unknown_architecture",
            Error::BadSpatialDims { .. } => "bad_spatial_dims",
            Error::DivergedLoss { .. } => "diverged_loss",
            Error::IndexMismatch => "index_mismatch",
            Error::ChipOutOfBounds { .. } => "chip_out_of_bounds",
            Error::SpecTooSmall(_) => "spec_too_small",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Tiff(_) => "tiff",
            Error::Json(_) => "json",
            Error::GeoJson(_) => "geojson",
        }
    }

    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch { expected: expected.to_vec(), found: found.to_vec() }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
