//! Georeferenced raster and vector data model.

pub mod geotiff;
mod raster;
mod transform;
pub mod vector;

pub use raster::{
    GeoRaster, LabelMask, LandClass, BAND_BLUE, BAND_GREEN, BAND_NIR, BAND_RED, IMAGE_BANDS, NUM_CLASSES,
};
pub use transform::AffineGeoTransform;
pub use vector::{Geometry, Point};
