//! Deterministic synthetic scenes: NRGB imagery, dense ground truth and sparsified
//! vector labels, interchangeable with real inputs downstream.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geo::{geotiff, vector, AffineGeoTransform, GeoRaster, Geometry, LabelMask, LandClass, Point, IMAGE_BANDS};
use crate::maskgen::{
    merge_masks_with, ndvi_mask, rasterize_lines, rasterize_polygons, ClassPriority, VectorFeature, DEFAULT_LINE_BUFFER_PX,
    DEFAULT_NDVI_THRESHOLD,
};
use crate::{Error, Result};

/// Smallest supported scene side, in pixels.
pub const MIN_SCENE_SIDE: usize = 64;
pub const SCENE_CRS: &str = "EPSG:32643";
const ORIGIN: (f64, f64) = (500_000.0, 2_000_000.0);
/// Guards the retention floor against representation error, e.g. `(1 - 0.9) * 10`.
const RETENTION_EPS: f64 = 1e-9;

/// Base (NIR, R, G, B) reflectance per class, indexed like [`LandClass`].
/// Every class except Trees has NDVI below -0.2; Trees sits near 0.67.
const SPECTRA: [[f32; 4]; 5] = [
    [0.35, 0.55, 0.50, 0.50],
    [0.20, 0.35, 0.35, 0.38],
    [0.60, 0.12, 0.30, 0.10],
    [0.03, 0.10, 0.18, 0.35],
    [0.28, 0.45, 0.38, 0.30],
];

fn default_vegetation() -> usize {
    6
}
fn default_road_buffer() -> u32 {
    DEFAULT_LINE_BUFFER_PX
}
fn default_pixel_size() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// (rows, cols)
    pub size: (usize, usize),
    pub n_buildings: usize,
    pub n_roads: usize,
    pub n_water: usize,
    #[serde(default = "default_vegetation")]
    pub n_vegetation: usize,
    /// Fraction of labelled objects withheld per class.
    pub sparsity: f64,
    pub noise_sigma: f64,
    #[serde(default = "default_road_buffer")]
    pub road_buffer_px: u32,
    #[serde(default = "default_pixel_size")]
    pub pixel_size: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::new(0, (512, 512))
    }
}

impl SceneSpec {
    pub fn new(seed: u64, size: (usize, usize)) -> Self {
        Self {
            seed,
            size,
            n_buildings: 40,
            n_roads: 4,
            n_water: 3,
            n_vegetation: default_vegetation(),
            sparsity: 0.0,
            noise_sigma: 0.0,
            road_buffer_px: default_road_buffer(),
            pixel_size: default_pixel_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.0 < MIN_SCENE_SIDE || self.size.1 < MIN_SCENE_SIDE {
            return Err(Error::SpecTooSmall(format!(
                "size {:?} below the {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE} minimum",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::InvalidParameter(format!("sparsity {} outside [0, 1]", self.sparsity)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::InvalidParameter(format!("pixel_size must be > 0, got {}", self.pixel_size)));
        }
        Ok(())
    }

    pub fn transform(&self) -> AffineGeoTransform {
        AffineGeoTransform::north_up(ORIGIN.0, ORIGIN.1, self.pixel_size, -self.pixel_size)
            .expect("validated pixel size")
    }
}

/// Vector labels of the three vector-labelled classes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassVectors {
    pub buildings: Vec<VectorFeature>,
    pub roads: Vec<VectorFeature>,
    pub water: Vec<VectorFeature>,
}

impl ClassVectors {
    pub fn get(&self, class: LandClass) -> &[VectorFeature] {
        match class {
            LandClass::Buildings => &self.buildings,
            LandClass::Roads => &self.roads,
            LandClass::Water => &self.water,
            LandClass::Trees | LandClass::Other => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.buildings.len() + self.roads.len() + self.water.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub raster: GeoRaster,
    pub dense: LabelMask,
    /// Every placed object.
    pub objects: ClassVectors,
    /// Objects that survived sparsification.
    pub sparse: ClassVectors,
    /// Vegetation regions (not vector-labelled; recovered from NDVI).
    pub vegetation: Vec<VectorFeature>,
}

impl SyntheticScene {
    /// Training labels as a labeller would produce them: the retained vectors rasterized,
    /// Trees taken from NDVI, everything else `Other`.
    pub fn sparse_mask(&self, road_buffer_px: u32) -> Result<LabelMask> {
        let t = self.raster.transform;
        let shape = self.raster.shape();
        let b = rasterize_polygons(&self.sparse.buildings, &t, shape)?;
        let r = rasterize_lines(&self.sparse.roads, &t, shape, road_buffer_px)?;
        let w = rasterize_polygons(&self.sparse.water, &t, shape)?;
        let v = ndvi_mask(&self.raster, DEFAULT_NDVI_THRESHOLD)?;
        merge_masks_with(&b, &r, &v, &w, &ClassPriority::default(), &self.raster.crs_id)
    }
}

/// Number of objects kept out of `n` at the given sparsity.
pub fn retained_count(n: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * n as f64) + RETENTION_EPS).floor().min(n as f64) as usize
}

/// Keeps a seeded subset; for a fixed seed and class the kept set shrinks monotonically
/// with `sparsity` because the shuffle does not depend on it.
fn sparsify(features: &[VectorFeature], sparsity: f64, seed: u64, class: LandClass) -> Vec<VectorFeature> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + class.index() as u64));
    order.shuffle(&mut rng);
    let mut keep = order[..retained_count(features.len(), sparsity)].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| features[i].clone()).collect()
}

fn to_world(t: &AffineGeoTransform, pts: &[(f64, f64)]) -> Vec<Point> {
    pts.iter()
        .map(|&(r, c)| {
            let (x, y) = t.apply(r, c);
            Point::new(x, y)
        })
        .collect()
}

fn rectangle(t: &AffineGeoTransform, r0: f64, c0: f64, h: f64, w: f64) -> Geometry {
    let ring = to_world(t, &[(r0, c0), (r0, c0 + w), (r0 + h, c0 + w), (r0 + h, c0), (r0, c0)]);
    Geometry::Polygon(vec![ring])
}

fn blob(t: &AffineGeoTransform, rng: &mut ChaCha8Rng, center: (f64, f64), radius: f64) -> Geometry {
    const VERTICES: usize = 16;
    let mut pts: Vec<(f64, f64)> = (0..VERTICES)
        .map(|k| {
            let a = k as f64 / VERTICES as f64 * std::f64::consts::TAU;
            let r = radius * rng.gen_range(0.75..1.0);
            (center.0 + r * a.sin(), center.1 + r * a.cos())
        })
        .collect();
    pts.push(pts[0]);
    Geometry::Polygon(vec![to_world(t, &pts)])
}

fn polyline(t: &AffineGeoTransform, rng: &mut ChaCha8Rng, rows: f64, cols: f64) -> Geometry {
    // Cross the scene roughly horizontally or vertically with 1-3 bends.
    let horizontal = rng.gen_bool(0.5);
    let bends = rng.gen_range(1..=3);
    let n = bends + 2;
    let (len, span) = if horizontal { (cols, rows) } else { (rows, cols) };
    let mut across = rng.gen_range(0.1..0.9) * span;
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let along = k as f64 / (n - 1) as f64 * len;
            if k > 0 {
                across = (across + rng.gen_range(-0.15..0.15) * span).clamp(0.05 * span, 0.95 * span);
            }
            if horizontal {
                (across, along)
            } else {
                (along, across)
            }
        })
        .collect();
    Geometry::LineString(to_world(t, &pts))
}

fn render(spec: &SceneSpec, dense: &Array2<u8>) -> Array3<f32> {
    let (rows, cols) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0001);
    let (pr, pc): (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let mut bands = Array3::<f32>::zeros((IMAGE_BANDS, rows, cols));
    for ((i, j), &c) in dense.indexed_iter() {
        // Brightness texture scales all bands together, leaving NDVI unchanged.
        let tex = 1.0 + 0.1 * ((i as f64 * 0.13 + pr).sin() * (j as f64 * 0.11 + pc).cos());
        for b in 0..IMAGE_BANDS {
            bands[[b, i, j]] = SPECTRA[c as usize][b] * tex as f32;
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in bands.iter_mut() {
            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    bands
}

/// Builds a scene from its spec; identical specs give identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (rows, cols) = spec.size;
    let (rf, cf) = (rows as f64, cols as f64);
    let t = spec.transform();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let buildings: Vec<VectorFeature> = (0..spec.n_buildings)
        .map(|_| {
            let h = rng.gen_range(6..=16) as f64;
            let w = rng.gen_range(6..=16) as f64;
            let r0 = rng.gen_range(0..(rows - h as usize)) as f64;
            let c0 = rng.gen_range(0..(cols - w as usize)) as f64;
            VectorFeature::new(rectangle(&t, r0, c0, h, w), LandClass::Buildings)
        })
        .collect();
    let roads: Vec<VectorFeature> = (0..spec.n_roads)
        .map(|_| VectorFeature::new(polyline(&t, &mut rng, rf, cf), LandClass::Roads))
        .collect();
    let side = rf.min(cf);
    let mut blobs = |n: usize, lo: f64, hi: f64, class: LandClass| -> Vec<VectorFeature> {
        (0..n)
            .map(|_| {
                let radius = side * rng.gen_range(lo..hi);
                let center = (rng.gen_range(0.0..rf), rng.gen_range(0.0..cf));
                VectorFeature::new(blob(&t, &mut rng, center, radius), class)
            })
            .collect()
    };
    let water = blobs(spec.n_water, 0.03, 0.08, LandClass::Water);
    let vegetation = blobs(spec.n_vegetation, 0.05, 0.12, LandClass::Trees);

    let shape = spec.size;
    let b = rasterize_polygons(&buildings, &t, shape)?;
    let r = rasterize_lines(&roads, &t, shape, spec.road_buffer_px)?;
    let w = rasterize_polygons(&water, &t, shape)?;
    let v = rasterize_polygons(&vegetation, &t, shape)?;
    let dense = merge_masks_with(&b, &r, &v, &w, &ClassPriority::default(), SCENE_CRS)?;
    let raster = GeoRaster::new(render(spec, &dense.classes), t, SCENE_CRS)?;

    let objects = ClassVectors { buildings, roads, water };
    let sparse = ClassVectors {
        buildings: sparsify(&objects.buildings, spec.sparsity, spec.seed, LandClass::Buildings),
        roads: sparsify(&objects.roads, spec.sparsity, spec.seed, LandClass::Roads),
        water: sparsify(&objects.water, spec.sparsity, spec.seed, LandClass::Water),
    };
    Ok(SyntheticScene { raster, dense, objects, sparse, vegetation })
}

/// Paths written by [`write_scene`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub raster: PathBuf,
    pub dense_mask: PathBuf,
    pub buildings: PathBuf,
    pub roads: PathBuf,
    pub water: PathBuf,
}

impl SceneFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            raster: dir.join("image.tif"),
            dense_mask: dir.join("dense_mask.tif"),
            buildings: dir.join("buildings.geojson"),
            roads: dir.join("roads.geojson"),
            water: dir.join("water.geojson"),
        }
    }
}

/// Writes the raster, dense mask and sparse per-class GeoJSON into `dir`.
pub fn write_scene(scene: &SyntheticScene, dir: &Path) -> Result<SceneFiles> {
    std::fs::create_dir_all(dir)?;
    let files = SceneFiles::in_dir(dir);
    geotiff::write_raster(&files.raster, &scene.raster)?;
    geotiff::write_label_mask(&files.dense_mask, &scene.dense)?;
    let geoms = |fs: &[VectorFeature]| fs.iter().map(|f| f.geometry.clone()).collect::<Vec<_>>();
    vector::write_geojson(&files.buildings, &geoms(&scene.sparse.buildings))?;
    vector::write_geojson(&files.roads, &geoms(&scene.sparse.roads))?;
    vector::write_geojson(&files.water, &geoms(&scene.sparse.water))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{merge_masks, ndvi, ndvi_mask, DEFAULT_NDVI_THRESHOLD};
    use proptest::prelude::*;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec { n_buildings: 12, ..SceneSpec::new(seed, (96, 128)) }
    }

    #[test]
    fn spectra_are_class_consistent() {
        for (c, s) in SPECTRA.iter().enumerate() {
            let v = ndvi(s[0], s[1]).unwrap();
            if c == LandClass::Trees.index() {
                assert!(v > 0.5);
            } else {
                assert!(v < -0.2, "class {c}: {v}");
            }
        }
    }

    #[test]
    fn sparsity_zero_roundtrips_through_maskgen() {
        let spec = small(3);
        let s = generate_scene(&spec).unwrap();
        let t = s.raster.transform;
        let b = rasterize_polygons(&s.sparse.buildings, &t, spec.size).unwrap();
        let r = rasterize_lines(&s.sparse.roads, &t, spec.size, spec.road_buffer_px).unwrap();
        let w = rasterize_polygons(&s.sparse.water, &t, spec.size).unwrap();
        let v = ndvi_mask(&s.raster, DEFAULT_NDVI_THRESHOLD).unwrap();
        assert_eq!(merge_masks(&b, &r, &v, &w).unwrap().classes, s.dense.classes);
        assert_eq!(s.sparse_mask(spec.road_buffer_px).unwrap().classes, s.dense.classes);
        let h = s.dense.histogram();
        assert!(h.iter().all(|&n| n > 0), "every class present: {h:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { noise_sigma: 0.05, sparsity: 0.3, ..small(11) };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        assert_ne!(generate_scene(&spec).unwrap().raster, generate_scene(&small(12)).unwrap().raster);
    }

    #[test]
    fn half_sparsity_keeps_exactly_half() {
        let spec = SceneSpec { n_buildings: 40, sparsity: 0.5, ..small(5) };
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.objects.buildings.len(), 40);
        assert_eq!(s.sparse.buildings.len(), 20);
    }

    #[test]
    fn sparse_mask_only_loses_labels_to_other() {
        let spec = SceneSpec { n_buildings: 30, sparsity: 0.5, ..small(9) };
        let s = generate_scene(&spec).unwrap();
        let m = s.sparse_mask(spec.road_buffer_px).unwrap();
        let prio = ClassPriority::default();
        let rank = |c: u8| prio.0.iter().position(|&p| p.index() as u8 == c).unwrap_or(prio.0.len());
        let mut lost = 0;
        for (&got, &want) in m.classes.iter().zip(&s.dense.classes) {
            if got != want {
                lost += 1;
                // a withheld object reveals a lower-priority label beneath it
                assert!(rank(got) > rank(want), "{got} vs {want}");
            }
        }
        assert!(lost > 0);
    }

    #[test]
    fn retention_floor_examples() {
        assert_eq!(retained_count(40, 0.5), 20);
        assert_eq!(retained_count(10, 0.9), 1);
        assert_eq!(retained_count(7, 0.5), 3);
        assert_eq!(retained_count(7, 1.0), 0);
        assert_eq!(retained_count(7, 0.0), 7);
    }

    #[test]
    fn undersized_spec_is_rejected() {
        assert!(matches!(generate_scene(&SceneSpec::new(0, (32, 256))), Err(Error::SpecTooSmall(_))));
        assert!(generate_scene(&SceneSpec { sparsity: 1.5, ..small(0) }).is_err());
    }

    #[test]
    fn write_scene_emits_readable_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&SceneSpec { sparsity: 0.5, ..small(2) }).unwrap();
        let files = write_scene(&s, dir.path()).unwrap();
        assert_eq!(geotiff::read_label_mask(&files.dense_mask).unwrap().classes, s.dense.classes);
        assert_eq!(geotiff::read_raster(&files.raster).unwrap().bands, s.raster.bands);
        assert_eq!(vector::read_geojson(&files.buildings).unwrap().len(), s.sparse.buildings.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn retained_sets_are_nested(seed in 0u64..1000, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let base = SceneSpec { n_buildings: 25, n_roads: 6, n_water: 5, ..small(seed) };
            let a = generate_scene(&SceneSpec { sparsity: lo, ..base.clone() }).unwrap();
            let b = generate_scene(&SceneSpec { sparsity: hi, ..base }).unwrap();
            for class in [LandClass::Buildings, LandClass::Roads, LandClass::Water] {
                for f in b.sparse.get(class) {
                    prop_assert!(a.sparse.get(class).contains(f));
                }
            }
        }

        #[test]
        fn trees_have_vegetation_ndvi_before_noise(seed in 0u64..1000) {
            let s = generate_scene(&small(seed)).unwrap();
            let v = ndvi_mask(&s.raster, DEFAULT_NDVI_THRESHOLD).unwrap();
            for ((i, j), &c) in s.dense.classes.indexed_iter() {
                prop_assert_eq!(v.values[[i, j]] == 1, c == LandClass::Trees.index() as u8);
            }
        }
    }
}
