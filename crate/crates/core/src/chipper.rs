//! Fixed-size chip extraction with the training-time NaN and class-density filters,
//! plus the on-disk chip store.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{AffineGeoTransform, GeoRaster, LabelMask, LandClass, IMAGE_BANDS, NUM_CLASSES};

pub const DEFAULT_CHIP_SIZE: usize = 256;
pub const DEFAULT_MIN_CLASS_DENSITY: f64 = 0.05;
/// Training chips must have strictly less than this fraction of nodata pixels.
pub const MAX_NAN_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChipIndex {
    pub row_off: usize,
    pub col_off: usize,
    pub chip_size: usize,
}

impl ChipIndex {
    pub fn file_stem(&self) -> String {
        format!("chip_{}_{}", self.row_off, self.col_off)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChipRecord {
    /// `[band, row, col]`, nodata filled with 0.
    pub image: Array3<f32>,
    pub label: Array2<u8>,
    pub index: ChipIndex,
    pub nan_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChipDataset {
    pub records: Vec<ChipRecord>,
    pub mode: DatasetMode,
    pub source_transform: AffineGeoTransform,
    pub source_shape: (usize, usize),
    pub crs_id: String,
    pub chip_size: usize,
    pub stride: usize,
}

impl ChipDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Pixel counts per class over every label chip.
    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut h = [0u64; NUM_CLASSES];
        for r in &self.records {
            for &v in r.label.iter() {
                h[v as usize] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChipOptions {
    pub chip_size: usize,
    pub stride: usize,
    pub min_class_density: f64,
}

impl Default for ChipOptions {
    fn default() -> Self {
        Self { chip_size: DEFAULT_CHIP_SIZE, stride: DEFAULT_CHIP_SIZE, min_class_density: DEFAULT_MIN_CLASS_DENSITY }
    }
}

fn axis_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| o + size <= extent).collect();
    if offs.last().is_some_and(|&o| o + size < extent) {
        offs.push(extent - size);
    }
    offs
}

/// Row-major chip offsets at `stride`, with a final edge-flush row/column so the
/// whole raster is covered.
pub fn chip_grid(raster_shape: (usize, usize), chip_size: usize, stride: usize) -> Result<Vec<ChipIndex>> {
    if chip_size == 0 || stride == 0 || stride > chip_size {
        return Err(Error::InvalidParameter(format!(
            "need chip_size >= 1 and 1 <= stride <= chip_size (got {chip_size}, {stride})"
        )));
    }
    if raster_shape.0 < chip_size || raster_shape.1 < chip_size {
        return Err(Error::RasterSmallerThanChip { raster: raster_shape, chip_size });
    }
    let rows = axis_offsets(raster_shape.0, chip_size, stride);
    let cols = axis_offsets(raster_shape.1, chip_size, stride);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| ChipIndex { row_off: r, col_off: c, chip_size }))
        .collect())
}

/// Fraction of spatial pixels flagged as nodata.
pub fn nan_fraction(image_chip: ArrayView3<'_, f32>, nodata_mask_chip: ArrayView2<'_, bool>) -> Result<f64> {
    let (_, h, w) = image_chip.dim();
    if nodata_mask_chip.dim() != (h, w) {
        let (mh, mw) = nodata_mask_chip.dim();
        return Err(Error::shape(&[h, w], &[mh, mw]));
    }
    if h * w == 0 {
        return Ok(0.0);
    }
    let n = nodata_mask_chip.iter().filter(|m| **m).count();
    Ok(n as f64 / (h * w) as f64)
}

/// Fraction of pixels whose class is not `Other`.
pub fn class_density(label_chip: ArrayView2<'_, u8>) -> Result<f64> {
    let mut labelled = 0usize;
    for &v in label_chip.iter() {
        if v as usize >= NUM_CLASSES {
            return Err(Error::InvalidClassValue(v));
        }
        labelled += (v != LandClass::Other as u8) as usize;
    }
    let n = label_chip.len();
    Ok(if n == 0 { 0.0 } else { labelled as f64 / n as f64 })
}

fn check_aligned(raster: &GeoRaster, mask: &LabelMask) -> Result<()> {
    if raster.shape() != mask.shape() {
        return Err(Error::Alignment(format!("raster {:?} vs mask {:?}", raster.shape(), mask.shape())));
    }
    if !raster.transform.approx_eq(&mask.transform, 1e-9) {
        return Err(Error::Alignment("raster and mask transforms differ".into()));
    }
    if !raster.crs_id.is_empty() && !mask.crs_id.is_empty() && raster.crs_id != mask.crs_id {
        return Err(Error::Alignment(format!("CRS `{}` vs `{}`", raster.crs_id, mask.crs_id)));
    }
    if raster.band_count() != IMAGE_BANDS {
        return Err(Error::Alignment(format!("expected {IMAGE_BANDS} bands, found {}", raster.band_count())));
    }
    Ok(())
}

/// Cuts aligned image/label chips.
///
/// Train mode keeps chips with `nan_fraction < 0.5` and
/// `class_density >= min_class_density`; eval mode keeps every chip. Nodata pixels are
/// zero-filled after the keep decision.
pub fn build_dataset(raster: &GeoRaster, mask: &LabelMask, mode: DatasetMode, opts: &ChipOptions) -> Result<ChipDataset> {
    check_aligned(raster, mask)?;
    let grid = chip_grid(raster.shape(), opts.chip_size, opts.stride)?;
    let size = opts.chip_size;
    let mut records = Vec::new();
    for index in grid {
        let (r0, c0) = (index.row_off, index.col_off);
        let image = raster.window(r0, c0, size, size);
        let nodata = raster.nodata_mask.slice(s![r0..r0 + size, c0..c0 + size]);
        let label = mask.classes.slice(s![r0..r0 + size, c0..c0 + size]);
        let nan_frac = nan_fraction(image, nodata)?;
        if mode == DatasetMode::Train
            && (nan_frac >= MAX_NAN_FRACTION || class_density(label)? < opts.min_class_density)
        {
            continue;
        }
        let mut image = image.to_owned();
        for mut band in image.outer_iter_mut() {
            ndarray::Zip::from(&mut band).and(&nodata).for_each(|v, &m| {
                if m || v.is_nan() {
                    *v = 0.0;
                }
            });
        }
        records.push(ChipRecord { image, label: label.to_owned(), index, nan_fraction: nan_frac });
    }
    Ok(ChipDataset {
        records,
        mode,
        source_transform: raster.transform,
        source_shape: raster.shape(),
        crs_id: raster.crs_id.clone(),
        chip_size: opts.chip_size,
        stride: opts.stride,
    })
}

/// `manifest.json` of a chip store directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipManifest {
    pub transform: AffineGeoTransform,
    pub crs_id: String,
    pub source_shape: (usize, usize),
    pub chip_size: usize,
    pub stride: usize,
    pub bands: usize,
    pub mode: DatasetMode,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub row_off: usize,
    pub col_off: usize,
    pub nan_fraction: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the dataset as `manifest.json` plus `chip_{row}_{col}.img` (f32 LE,
/// band-major) and `.lbl` (u8) files.
pub fn save_dataset(ds: &ChipDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = ChipManifest {
        transform: ds.source_transform,
        crs_id: ds.crs_id.clone(),
        source_shape: ds.source_shape,
        chip_size: ds.chip_size,
        stride: ds.stride,
        bands: IMAGE_BANDS,
        mode: ds.mode,
        records: ds
            .records
            .iter()
            .map(|r| ManifestRecord { row_off: r.index.row_off, col_off: r.index.col_off, nan_fraction: r.nan_fraction })
            .collect(),
    };
    for r in &ds.records {
        let stem = r.index.file_stem();
        let mut img = BufWriter::new(fs::File::create(dir.join(format!("{stem}.img")))?);
        for v in r.image.iter() {
            img.write_all(&v.to_le_bytes())?;
        }
        img.flush()?;
        fs::write(dir.join(format!("{stem}.lbl")), r.label.iter().copied().collect::<Vec<u8>>())?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<ChipDataset> {
    let dir = dir.as_ref();
    let manifest: ChipManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let size = manifest.chip_size;
    let bands = manifest.bands;
    let mut records = Vec::with_capacity(manifest.records.len());
    for m in &manifest.records {
        let index = ChipIndex { row_off: m.row_off, col_off: m.col_off, chip_size: size };
        let stem = index.file_stem();
        let img_path = dir.join(format!("{stem}.img"));
        let bytes = fs::read(&img_path)?;
        if bytes.len() != bands * size * size * 4 {
            return Err(Error::format(&img_path, format!("expected {} bytes, found {}", bands * size * size * 4, bytes.len())));
        }
        let vals: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let image = Array3::from_shape_vec((bands, size, size), vals).map_err(|e| Error::format(&img_path, e.to_string()))?;
        let lbl_path = dir.join(format!("{stem}.lbl"));
        let lbl = fs::read(&lbl_path)?;
        if let Some(bad) = lbl.iter().find(|v| **v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidClassValue(*bad));
        }
        let label = Array2::from_shape_vec((size, size), lbl).map_err(|e| Error::format(&lbl_path, e.to_string()))?;
        records.push(ChipRecord { image, label, index, nan_fraction: m.nan_fraction });
    }
    Ok(ChipDataset {
        records,
        mode: manifest.mode,
        source_transform: manifest.transform,
        source_shape: manifest.source_shape,
        crs_id: manifest.crs_id,
        chip_size: size,
        stride: manifest.stride,
    })
}
