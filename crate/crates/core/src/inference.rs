//! Prediction, two-model ensembling, max-pool mosaicking and per-class recall.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::chipper::{ChipDataset, ChipIndex};
use crate::geo::{geotiff, AffineGeoTransform, LabelMask, LandClass, NUM_CLASSES};
use crate::models::SegmentationModel;
use crate::trainer::collate;
use crate::{Error, Result, Scalar};

/// Classes reported in averages and tables (everything but `Other`), in table order.
pub const REPORTED_CLASSES: [LandClass; 4] = [LandClass::Trees, LandClass::Buildings, LandClass::Water, LandClass::Roads];
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.4, 0.5];

/// Softmax probabilities `[5, size, size]` of one chip.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityChip<T> {
    pub probs: Array3<T>,
    pub index: ChipIndex,
}

impl<T: Scalar> ProbabilityChip<T> {
    pub fn new(probs: Array3<T>, index: ChipIndex) -> Result<Self> {
        let (c, h, w) = probs.dim();
        if c != NUM_CLASSES || h != index.chip_size || w != index.chip_size {
            return Err(Error::shape(&[NUM_CLASSES, index.chip_size, index.chip_size], &[c, h, w]));
        }
        Ok(Self { probs, index })
    }

    /// Largest deviation of a per-pixel class sum from 1.
    pub fn simplex_error(&self) -> f64 {
        self.probs
            .sum_axis(Axis(0))
            .iter()
            .map(|s| (s.to_f64_lossy() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Element-wise mean of two chips' probabilities.
pub fn ensemble<T: Scalar>(p1: &ProbabilityChip<T>, p2: &ProbabilityChip<T>) -> Result<ProbabilityChip<T>> {
    if p1.index != p2.index {
        return Err(Error::IndexMismatch);
    }
    if p1.probs.dim() != p2.probs.dim() {
        return Err(Error::shape(p1.probs.shape(), p2.probs.shape()));
    }
    let half = T::of(0.5);
    let probs = ndarray::Zip::from(&p1.probs).and(&p2.probs).map_collect(|&a, &b| (a + b) * half);
    Ok(ProbabilityChip { probs, index: p1.index })
}

/// Softmax predictions for every chip of `ds`; with two models the outputs are ensembled.
pub fn predict_dataset<T: Scalar>(
    models: &[&SegmentationModel<T>],
    ds: &ChipDataset,
    batch_size: usize,
) -> Result<Vec<ProbabilityChip<T>>> {
    if models.is_empty() || models.len() > 2 {
        return Err(Error::InvalidParameter(format!("expected 1 or 2 models, got {}", models.len())));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for batch in all.chunks(batch_size.max(1)) {
        let (x, _) = collate::<T>(ds, batch);
        let probs: Vec<_> = models.iter().map(|m| m.forward(x.view()).map(|l| l.softmax())).collect::<Result<_>>()?;
        for (bi, &i) in batch.iter().enumerate() {
            let index = ds.records[i].index;
            let chips: Vec<_> = probs
                .iter()
                .map(|p| ProbabilityChip::new(p.index_axis(Axis(0), bi).to_owned(), index))
                .collect::<Result<_>>()?;
            out.push(match chips.as_slice() {
                [a, b] => ensemble(a, b)?,
                [a] => a.clone(),
                _ => unreachable!("one or two models"),
            });
        }
    }
    Ok(out)
}

/// Full-scene probabilities reassembled from chips.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMosaic<T> {
    pub probs: Array3<T>,
    pub transform: AffineGeoTransform,
    /// Number of chips covering each pixel.
    pub coverage: Array2<u32>,
    pub crs_id: String,
}

impl<T: Scalar> ProbabilityMosaic<T> {
    pub fn shape(&self) -> (usize, usize) {
        (self.probs.dim().1, self.probs.dim().2)
    }

    /// Per-pixel most probable class; ties go to the lower index, uncovered pixels are `Other`.
    pub fn argmax(&self) -> Array2<u8> {
        let (h, w) = self.shape();
        Array2::from_shape_fn((h, w), |(i, j)| {
            if self.coverage[[i, j]] == 0 {
                return LandClass::Other.index() as u8;
            }
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if self.probs[[c, i, j]] > self.probs[[best, i, j]] {
                    best = c;
                }
            }
            best as u8
        })
    }
}

/// Places chips by their offsets, taking the per-class maximum where chips overlap.
pub fn merge_chips<T: Scalar>(
    chips: &[ProbabilityChip<T>],
    mosaic_shape: (usize, usize),
    transform: &AffineGeoTransform,
    crs_id: &str,
) -> Result<ProbabilityMosaic<T>> {
    let (rows, cols) = mosaic_shape;
    let mut probs = Array3::<T>::zeros((NUM_CLASSES, rows, cols));
    let mut coverage = Array2::<u32>::zeros((rows, cols));
    for chip in chips {
        let ChipIndex { row_off, col_off, chip_size } = chip.index;
        if row_off + chip_size > rows || col_off + chip_size > cols {
            return Err(Error::ChipOutOfBounds { row_off, col_off, size: chip_size, shape: mosaic_shape });
        }
        let window = s![.., row_off..row_off + chip_size, col_off..col_off + chip_size];
        let mut cov = coverage.slice_mut(s![row_off..row_off + chip_size, col_off..col_off + chip_size]);
        let first = cov.mapv(|c| c == 0);
        cov += 1;
        ndarray::Zip::from(probs.slice_mut(window).lanes_mut(Axis(0)))
            .and(chip.probs.lanes(Axis(0)))
            .and(&first)
            .for_each(|mut dst, src, &first| {
                for (d, &v) in dst.iter_mut().zip(src) {
                    if first || v > *d {
                        *d = v;
                    }
                }
            });
    }
    Ok(ProbabilityMosaic { probs, transform: *transform, coverage, crs_id: crs_id.to_string() })
}

/// Per-class recall; `None` marks classes absent from the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassRecalls(pub [Option<f64>; NUM_CLASSES]);

impl ClassRecalls {
    pub fn get(&self, class: LandClass) -> Option<f64> {
        self.0[class.index()]
    }

    /// Mean over the reported classes that are defined.
    pub fn mean_reported(&self) -> Option<f64> {
        let defined: Vec<f64> = REPORTED_CLASSES.iter().filter_map(|&c| self.get(c)).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// A pixel is predicted as class `c` when `probs_c >= threshold`; recall is
/// `TP / (TP + FN)` over ground-truth pixels of `c`.
pub fn recall_per_class<T: Scalar>(mosaic: &ProbabilityMosaic<T>, gt: &LabelMask, threshold: f64) -> Result<ClassRecalls> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} outside (0, 1)")));
    }
    if mosaic.shape() != gt.shape() {
        return Err(Error::Alignment(format!("mosaic {:?} vs ground truth {:?}", mosaic.shape(), gt.shape())));
    }
    if !mosaic.transform.approx_eq(&gt.transform, 1e-9) {
        return Err(Error::Alignment("mosaic and ground truth transforms differ".into()));
    }
    let th = T::of(threshold);
    let mut tp = [0u64; NUM_CLASSES];
    let mut total = [0u64; NUM_CLASSES];
    for ((i, j), &c) in gt.classes.indexed_iter() {
        let c = c as usize;
        total[c] += 1;
        if mosaic.probs[[c, i, j]] >= th {
            tp[c] += 1;
        }
    }
    Ok(ClassRecalls(std::array::from_fn(|c| (total[c] > 0).then(|| tp[c] as f64 / total[c] as f64))))
}

fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Recalls at several thresholds, serialized as `{class: {threshold: recall}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub model: String,
    pub thresholds: Vec<f64>,
    pub recall: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    /// Mean over the reported classes per threshold.
    pub mean_reported: BTreeMap<String, Option<f64>>,
}

impl RecallReport {
    pub fn evaluate<T: Scalar>(model: &str, mosaic: &ProbabilityMosaic<T>, gt: &LabelMask, thresholds: &[f64]) -> Result<Self> {
        let mut recall: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
        let mut mean_reported = BTreeMap::new();
        for &t in thresholds {
            let r = recall_per_class(mosaic, gt, t)?;
            for class in LandClass::ALL {
                recall.entry(class.name().to_string()).or_default().insert(threshold_key(t), r.get(class));
            }
            mean_reported.insert(threshold_key(t), r.mean_reported());
        }
        Ok(Self { model: model.to_string(), thresholds: thresholds.to_vec(), recall, mean_reported })
    }

    pub fn get(&self, class: LandClass, threshold: f64) -> Option<f64> {
        self.recall.get(class.name()).and_then(|m| m.get(&threshold_key(threshold))).copied().flatten()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Plain-text table: one row per threshold, recall in percent per reported class.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let header = ["Model/Framework", "Threshold"]
            .into_iter()
            .chain(REPORTED_CLASSES.iter().map(|c| c.name()))
            .map(|h| format!("{h:>15}"))
            .collect::<Vec<_>>()
            .join(" |");
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.len()));
        for (k, &t) in self.thresholds.iter().enumerate() {
            let name = if k == 0 { self.model.as_str() } else { "" };
            let mut row = vec![format!("{name:>15}"), format!("{t:>15}")];
            for &c in &REPORTED_CLASSES {
                row.push(match self.get(c, t) {
                    Some(r) => format!("{:>15.4}", r * 100.0),
                    None => format!("{:>15}", "n/a"),
                });
            }
            let _ = writeln!(out, "{}", row.join(" |"));
        }
        out
    }
}

/// Writes the 5-band probability GeoTIFF and the single-band argmax class GeoTIFF.
pub fn write_mosaic<T: Scalar>(mosaic: &ProbabilityMosaic<T>, probs_path: &Path, classes_path: &Path) -> Result<()> {
    let probs = mosaic.probs.mapv(|v| v.to_f64_lossy() as f32);
    geotiff::write_bands(probs_path, &probs, None, &mosaic.transform, &mosaic.crs_id)?;
    geotiff::write_u8(classes_path, &mosaic.argmax(), &mosaic.transform, &mosaic.crs_id)
}

/// Reads a probability GeoTIFF; pixels with any non-zero probability count as covered once.
pub fn read_mosaic(probs_path: &Path) -> Result<ProbabilityMosaic<f32>> {
    let r = geotiff::read_raster(probs_path)?;
    if r.band_count() != NUM_CLASSES {
        return Err(Error::format(probs_path, format!("expected {NUM_CLASSES} bands, found {}", r.band_count())));
    }
    let coverage = r.bands.map_axis(Axis(0), |p| u32::from(p.iter().any(|&v| v != 0.0)));
    Ok(ProbabilityMosaic { probs: r.bands, transform: r.transform, coverage, crs_id: r.crs_id })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbabilityManifest {
    chip_size: usize,
    chips: Vec<ChipIndex>,
}

const PROB_MANIFEST: &str = "probabilities.json";

/// Stores chips as `<stem>.prob` (little-endian f32, class-major) plus a manifest.
pub fn save_probability_chips<T: Scalar>(chips: &[ProbabilityChip<T>], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for c in chips {
        let bytes: Vec<u8> = c.probs.iter().flat_map(|v| v.to_le_f32_bytes()).collect();
        fs::write(dir.join(format!("{}.prob", c.index.file_stem())), bytes)?;
    }
    let manifest = ProbabilityManifest {
        chip_size: chips.first().map_or(0, |c| c.index.chip_size),
        chips: chips.iter().map(|c| c.index).collect(),
    };
    fs::write(dir.join(PROB_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_probability_chips<T: Scalar>(dir: &Path) -> Result<Vec<ProbabilityChip<T>>> {
    let manifest: ProbabilityManifest = serde_json::from_slice(&fs::read(dir.join(PROB_MANIFEST))?)?;
    manifest
        .chips
        .into_iter()
        .map(|index| {
            let path = dir.join(format!("{}.prob", index.file_stem()));
            let bytes = fs::read(&path)?;
            let n = NUM_CLASSES * index.chip_size * index.chip_size;
            if bytes.len() != n * 4 {
                return Err(Error::format(&path, format!("expected {} bytes, found {}", n * 4, bytes.len())));
            }
            let values = bytes.chunks_exact(4).map(|b| T::from_le_f32_bytes(b.try_into().expect("4 bytes"))).collect();
            let probs = Array3::from_shape_vec((NUM_CLASSES, index.chip_size, index.chip_size), values)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            ProbabilityChip::new(probs, index)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn idx(r: usize, c: usize, s: usize) -> ChipIndex {
        ChipIndex { row_off: r, col_off: c, chip_size: s }
    }

    fn constant_chip(index: ChipIndex, v: [f64; 5]) -> ProbabilityChip<f64> {
        let s = index.chip_size;
        ProbabilityChip::new(Array3::from_shape_fn((5, s, s), |(c, _, _)| v[c]), index).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let a = constant_chip(idx(0, 0, 2), [0.2, 0.8, 0.0, 0.0, 0.0]);
        let b = constant_chip(idx(0, 0, 2), [0.6, 0.4, 0.0, 0.0, 0.0]);
        let e = ensemble(&a, &b).unwrap();
        assert_abs_diff_eq!(e.probs[[0, 1, 1]], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(e.probs[[1, 0, 1]], 0.6, epsilon = 1e-12);
        assert!(e.simplex_error() < 1e-12);
        assert_eq!(ensemble(&a, &a).unwrap(), a);
        let c = constant_chip(idx(0, 2, 2), [0.2, 0.8, 0.0, 0.0, 0.0]);
        assert!(matches!(ensemble(&a, &c), Err(Error::IndexMismatch)));
    }

    #[test]
    fn merge_places_and_takes_max() {
        let t = AffineGeoTransform::identity();
        let a = constant_chip(idx(0, 0, 2), [0.3, 0.7, 0.0, 0.0, 0.0]);
        let m = merge_chips(std::slice::from_ref(&a), (3, 3), &t, "").unwrap();
        assert_eq!(m.probs.slice(s![.., 0..2, 0..2]), a.probs);
        assert_eq!(m.coverage[[2, 2]], 0);
        assert_eq!(m.probs[[1, 2, 2]], 0.0);
        let b = constant_chip(idx(1, 1, 2), [0.7, 0.3, 0.0, 0.0, 0.0]);
        let m = merge_chips(&[a, b.clone()], (3, 3), &t, "").unwrap();
        assert_eq!(m.probs[[0, 1, 1]], 0.7);
        assert_eq!(m.probs[[1, 1, 1]], 0.7);
        assert_eq!(m.coverage[[1, 1]], 2);
        assert!(matches!(merge_chips(&[b], (2, 3), &t, ""), Err(Error::ChipOutOfBounds { .. })));
    }

    #[test]
    fn recall_examples() {
        let t = AffineGeoTransform::identity();
        let gt = LabelMask::new(Array2::from_shape_fn((4, 4), |(i, _)| if i == 0 { 1 } else { 4 }), t, "").unwrap();
        let mut probs = Array3::<f64>::zeros((5, 4, 4));
        for j in 0..3 {
            probs[[1, 0, j]] = 0.6;
        }
        probs[[1, 0, 3]] = 0.3;
        let m = ProbabilityMosaic { probs, transform: t, coverage: Array2::ones((4, 4)), crs_id: String::new() };
        let r = recall_per_class(&m, &gt, 0.5).unwrap();
        assert_eq!(r.get(LandClass::Roads), Some(0.75));
        assert_eq!(r.get(LandClass::Other), Some(0.0));
        assert_eq!(r.get(LandClass::Water), None);
        assert_eq!(r.mean_reported(), Some(0.75));
        assert_eq!(recall_per_class(&m, &gt, 0.3).unwrap().get(LandClass::Roads), Some(1.0));
        assert!(recall_per_class(&m, &gt, 1.0).is_err());
    }

    #[test]
    fn report_has_every_threshold_and_a_table_row_each() {
        let t = AffineGeoTransform::identity();
        let gt = LabelMask::new(Array2::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as u8), t, "").unwrap();
        let m = ProbabilityMosaic {
            probs: Array3::from_elem((5, 2, 2), 0.45),
            transform: t,
            coverage: Array2::ones((2, 2)),
            crs_id: String::new(),
        };
        let rep = RecallReport::evaluate("cps", &m, &gt, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rep.get(LandClass::Trees, 0.4), Some(1.0));
        assert_eq!(rep.get(LandClass::Trees, 0.5), Some(0.0));
        let json: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(json["recall"]["Buildings"]["0.4"], 1.0);
        let table = rep.to_table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("100.0000") && table.contains("0.0000"));
    }

    #[test]
    fn probability_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let chips = vec![
            ProbabilityChip::new(Array3::from_shape_fn((5, 4, 4), |(c, i, j)| (c + i + j) as f32 / 16.0), idx(0, 0, 4)).unwrap(),
            ProbabilityChip::new(Array3::from_elem((5, 4, 4), 0.2f32), idx(4, 0, 4)).unwrap(),
        ];
        save_probability_chips(&chips, dir.path()).unwrap();
        assert_eq!(load_probability_chips::<f32>(dir.path()).unwrap(), chips);
    }

    #[test]
    fn mosaic_geotiff_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = AffineGeoTransform::north_up(10.0, 20.0, 1.0, -1.0).unwrap();
        let chip = ProbabilityChip::new(Array3::from_shape_fn((5, 4, 4), |(c, _, _)| [0.1f32, 0.6, 0.1, 0.1, 0.1][c]), idx(0, 0, 4)).unwrap();
        let m = merge_chips(&[chip], (4, 6), &t, "EPSG:4326").unwrap();
        let (p, c) = (dir.path().join("p.tif"), dir.path().join("c.tif"));
        write_mosaic(&m, &p, &c).unwrap();
        let back = read_mosaic(&p).unwrap();
        assert_eq!(back.probs, m.probs);
        assert_eq!(back.coverage, m.coverage);
        let (classes, _, _) = geotiff::read_u8(&c).unwrap();
        assert_eq!(classes[[0, 0]], 1);
        assert_eq!(classes[[0, 5]], LandClass::Other.index() as u8);
    }
}
