use ndarray::{s, Array2, Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use super::AffineGeoTransform;
use crate::error::{Error, Result};

/// Number of land-cover classes.
pub const NUM_CLASSES: usize = 5;

/// Band positions of NRGB imagery.
pub const BAND_NIR: usize = 0;
pub const BAND_RED: usize = 1;
pub const BAND_GREEN: usize = 2;
pub const BAND_BLUE: usize = 3;
pub const IMAGE_BANDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum LandClass {
    Buildings = 0,
    Roads = 1,
    Trees = 2,
    Water = 3,
    Other = 4,
}

impl LandClass {
    pub const ALL: [LandClass; NUM_CLASSES] =
        [LandClass::Buildings, LandClass::Roads, LandClass::Trees, LandClass::Water, LandClass::Other];

    /// Classes reported in recall summaries; `Other` is excluded.
    pub const NAMED: [LandClass; 4] =
        [LandClass::Buildings, LandClass::Roads, LandClass::Trees, LandClass::Water];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(LandClass::Buildings),
            1 => Ok(LandClass::Roads),
            2 => Ok(LandClass::Trees),
            3 => Ok(LandClass::Water),
            4 => Ok(LandClass::Other),
            v => Err(Error::InvalidClassValue(v)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LandClass::Buildings => "Buildings",
            LandClass::Roads => "Roads",
            LandClass::Trees => "Trees",
            LandClass::Water => "Water",
            LandClass::Other => "Other",
        }
    }
}

impl std::fmt::Display for LandClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Multi-band georeferenced image, band order (NIR, R, G, B) for imagery.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    /// `[band, row, col]`
    pub bands: Array3<f32>,
    pub transform: AffineGeoTransform,
    /// `[row, col]`, true where the pixel is nodata in any band.
    pub nodata_mask: Array2<bool>,
    pub crs_id: String,
}

impl GeoRaster {
    /// Builds a raster, marking every pixel that is NaN in any band as nodata.
    pub fn new(bands: Array3<f32>, transform: AffineGeoTransform, crs_id: impl Into<String>) -> Result<Self> {
        let (_, rows, cols) = bands.dim();
        let mut mask = Array2::from_elem((rows, cols), false);
        for band in bands.outer_iter() {
            Zip::from(&mut mask).and(&band).for_each(|m, v| *m |= v.is_nan());
        }
        Self::with_mask(bands, transform, mask, crs_id)
    }

    /// Builds a raster with an explicit nodata mask; NaN pixels are added to it.
    pub fn with_mask(
        bands: Array3<f32>,
        transform: AffineGeoTransform,
        mut nodata_mask: Array2<bool>,
        crs_id: impl Into<String>,
    ) -> Result<Self> {
        transform.validate()?;
        let (nb, rows, cols) = bands.dim();
        if nb == 0 || rows == 0 || cols == 0 {
            return Err(Error::EmptyShape((rows, cols)));
        }
        if nodata_mask.dim() != (rows, cols) {
            let (mr, mc) = nodata_mask.dim();
            return Err(Error::shape(&[rows, cols], &[mr, mc]));
        }
        for band in bands.outer_iter() {
            Zip::from(&mut nodata_mask).and(&band).for_each(|m, v| *m |= v.is_nan());
        }
        Ok(Self { bands, transform, nodata_mask, crs_id: crs_id.into() })
    }

    /// Marks pixels equal to `nodata` in any band.
    pub fn apply_nodata_value(&mut self, nodata: f32) {
        if nodata.is_nan() {
            return;
        }
        for band in self.bands.outer_iter() {
            Zip::from(&mut self.nodata_mask).and(&band).for_each(|m, v| *m |= *v == nodata);
        }
    }

    pub fn band_count(&self) -> usize {
        self.bands.dim().0
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, r, c) = self.bands.dim();
        (r, c)
    }

    pub fn window(&self, row_off: usize, col_off: usize, rows: usize, cols: usize) -> ArrayView3<'_, f32> {
        self.bands.slice(s![.., row_off..row_off + rows, col_off..col_off + cols])
    }
}

/// Single-band class raster with values in `0..NUM_CLASSES`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub classes: Array2<u8>,
    pub transform: AffineGeoTransform,
    pub crs_id: String,
}

impl LabelMask {
    pub fn new(classes: Array2<u8>, transform: AffineGeoTransform, crs_id: impl Into<String>) -> Result<Self> {
        transform.validate()?;
        if let Some(bad) = classes.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidClassValue(*bad));
        }
        Ok(Self { classes, transform, crs_id: crs_id.into() })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.classes.dim()
    }

    /// Pixel counts per class.
    pub fn histogram(&self) -> [u64; NUM_CLASSES] {
        let mut h = [0u64; NUM_CLASSES];
        for &v in self.classes.iter() {
            h[v as usize] += 1;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn nan_pixels_become_nodata() {
        let mut bands = Array3::<f32>::zeros((4, 3, 3));
        bands[[2, 1, 1]] = f32::NAN;
        let r = GeoRaster::new(bands, AffineGeoTransform::identity(), "EPSG:32643").unwrap();
        assert!(r.nodata_mask[[1, 1]]);
        assert_eq!(r.nodata_mask.iter().filter(|m| **m).count(), 1);
    }

    #[test]
    fn label_mask_rejects_out_of_range() {
        let mut c = Array2::<u8>::zeros((2, 2));
        c[[0, 1]] = 5;
        assert!(matches!(
            LabelMask::new(c, AffineGeoTransform::identity(), ""),
            Err(Error::InvalidClassValue(5))
        ));
    }

    #[test]
    fn mask_shape_checked() {
        let bands = Array3::<f32>::zeros((4, 3, 3));
        let mask = Array2::from_elem((3, 2), false);
        assert!(GeoRaster::with_mask(bands, AffineGeoTransform::identity(), mask, "").is_err());
    }
}
