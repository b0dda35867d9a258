//! The pipeline stages. Each stage clears and owns one directory under the output
//! directory, writes the resolved config and a provenance record beside its outputs,
//! and returns a one-line human summary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lulc_core::chipper::{build_dataset, load_dataset, save_dataset, ChipManifest, DatasetMode, MANIFEST_FILE};
use lulc_core::geo::{geotiff, vector, LandClass};
use lulc_core::inference::{
    load_probability_chips, merge_chips, predict_dataset, read_mosaic, save_probability_chips, write_mosaic, RecallReport,
};
use lulc_core::maskgen::{merge_masks_with, ndvi_mask, rasterize_lines, rasterize_polygons, VectorFeature};
use lulc_core::models::{load_checkpoint, PARAMS_FILE};
use lulc_core::synth::{generate_scene, write_scene};
use lulc_core::trainer::{train_cps, train_supervised, Regime, FIRST_MODEL_DIR, SECOND_MODEL_DIR, SINGLE_MODEL_DIR};
use lulc_core::Model32;
use serde::Serialize;
use serde_json::json;
use tracing::info;

use crate::artifacts::StageRecord;
use crate::config::{ExperimentConfig, RESOLVED_CONFIG_FILE};

pub const SYNTH_DIR: &str = "synth";
pub const MASKS_DIR: &str = "masks";
pub const LABELS_FILE: &str = "labels.tif";
pub const CHIPS_DIR: &str = "chips";
pub const TRAIN_CHIPS: &str = "train";
pub const EVAL_CHIPS: &str = "eval";
pub const TRAIN_DIR: &str = "train";
pub const PREDICT_DIR: &str = "predict";
pub const MERGE_DIR: &str = "merge";
pub const PROBABILITIES_FILE: &str = "probabilities.tif";
pub const CLASSES_FILE: &str = "classes.tif";
pub const EVAL_DIR: &str = "evaluate";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

/// Stage names in pipeline order (`synth` is separate: it produces inputs).
pub const PIPELINE: [&str; 6] = ["rasterize", "chip", "train", "predict", "merge", "evaluate"];

fn section<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config sections serialize")
}

/// Clears the stage directory and writes the resolved config into it.
fn begin(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir().join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {dir:?}"))?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.to_json())?;
    Ok(dir)
}

fn finish(dir: &Path, record: StageRecord, outputs: &[&Path]) -> Result<()> {
    let record = record.with_outputs(outputs)?;
    info!(stage = %record.stage, key = %record.key, "stage complete");
    record.write(dir)?;
    Ok(())
}

fn path(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("resolved config")
}

pub fn synth(cfg: &ExperimentConfig) -> Result<String> {
    let record = StageRecord::new("synth", section(&cfg.synth), &[])?;
    let scene = generate_scene(&cfg.synth)?;
    let dir = begin(cfg, SYNTH_DIR)?;
    let files = write_scene(&scene, &dir)?;
    finish(&dir, record, &[&files.raster, &files.dense_mask, &files.buildings, &files.roads, &files.water])?;
    Ok(format!(
        "synth: {}x{} scene with {} buildings, {} roads, {} water bodies ({} labelled) -> {}",
        cfg.synth.size.0,
        cfg.synth.size.1,
        scene.objects.buildings.len(),
        scene.objects.roads.len(),
        scene.objects.water.len(),
        scene.sparse.len(),
        dir.display()
    ))
}

fn read_features(p: &Path, class: LandClass) -> Result<Vec<VectorFeature>> {
    let geoms = vector::read_geojson(p).with_context(|| format!("reading {p:?}"))?;
    Ok(geoms.into_iter().map(|g| VectorFeature::new(g, class)).collect())
}

pub fn rasterize(cfg: &ExperimentConfig) -> Result<String> {
    let p = &cfg.paths;
    let (raster_p, b_p, r_p, w_p) = (path(&p.raster), path(&p.buildings), path(&p.roads), path(&p.water));
    let record = StageRecord::new("rasterize", section(&cfg.maskgen), &[raster_p, b_p, r_p, w_p])?;
    let raster = geotiff::read_raster(raster_p).with_context(|| format!("reading {raster_p:?}"))?;
    let (t, shape) = (raster.transform, raster.shape());
    let m = &cfg.maskgen;
    let buildings = rasterize_polygons(&read_features(b_p, LandClass::Buildings)?, &t, shape)?;
    let roads = rasterize_lines(&read_features(r_p, LandClass::Roads)?, &t, shape, m.buffer_px)?;
    let water = rasterize_polygons(&read_features(w_p, LandClass::Water)?, &t, shape)?;
    let trees = ndvi_mask(&raster, m.ndvi_threshold)?;
    let labels = merge_masks_with(&buildings, &roads, &trees, &water, &m.class_priority, &raster.crs_id)?;

    let dir = begin(cfg, MASKS_DIR)?;
    let mut outputs = Vec::new();
    for (name, mask) in [("buildings", &buildings), ("roads", &roads), ("trees", &trees), ("water", &water)] {
        let out = dir.join(format!("{name}.tif"));
        geotiff::write_u8(&out, &mask.values, &t, &raster.crs_id)?;
        outputs.push(out);
    }
    let labels_p = dir.join(LABELS_FILE);
    geotiff::write_label_mask(&labels_p, &labels)?;
    outputs.push(labels_p);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(&dir, record, &refs)?;
    let h = labels.histogram();
    Ok(format!("rasterize: label histogram {h:?} (buildings, roads, trees, water, other) -> {}", dir.display()))
}

pub fn chip(cfg: &ExperimentConfig) -> Result<String> {
    let raster_p = path(&cfg.paths.raster);
    let labels_p = cfg.output_dir().join(MASKS_DIR).join(LABELS_FILE);
    let record = StageRecord::new("chip", section(&cfg.chipper), &[raster_p, &labels_p])?;
    let raster = geotiff::read_raster(raster_p)?;
    let labels = geotiff::read_label_mask(&labels_p).with_context(|| format!("reading {labels_p:?}; run rasterize first"))?;
    let train = build_dataset(&raster, &labels, DatasetMode::Train, &cfg.chipper)?;
    let eval = build_dataset(&raster, &labels, DatasetMode::Eval, &cfg.chipper)?;
    let dir = begin(cfg, CHIPS_DIR)?;
    let (train_dir, eval_dir) = (dir.join(TRAIN_CHIPS), dir.join(EVAL_CHIPS));
    save_dataset(&train, &train_dir)?;
    save_dataset(&eval, &eval_dir)?;
    finish(&dir, record, &[&train_dir, &eval_dir])?;
    Ok(format!("chip: {} training chips, {} evaluation chips -> {}", train.len(), eval.len(), dir.display()))
}

pub fn train(cfg: &ExperimentConfig) -> Result<String> {
    let chips = cfg.output_dir().join(CHIPS_DIR).join(TRAIN_CHIPS);
    let record = StageRecord::new("train", section(&cfg.train), &[&chips])?;
    let ds = load_dataset(&chips).with_context(|| format!("loading {chips:?}; run chip first"))?;
    let dir = begin(cfg, TRAIN_DIR)?;
    info!(regime = ?cfg.train.regime, chips = ds.len(), epochs = cfg.train.epochs, "training");
    let (history, outputs) = if cfg.train.regime == Regime::Cps {
        let out = train_cps::<f32>(&cfg.train, &ds)?;
        (out.history, vec![dir.join(FIRST_MODEL_DIR).join(PARAMS_FILE), dir.join(SECOND_MODEL_DIR).join(PARAMS_FILE)])
    } else {
        let out = train_supervised::<f32>(&cfg.train, &ds)?;
        (out.history, vec![dir.join(SINGLE_MODEL_DIR).join(PARAMS_FILE)])
    };
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(&dir, record, &refs)?;
    let last = history.records.last().map_or(f64::NAN, |r| r.total);
    Ok(format!("train: {} epochs, final loss {last:.6} -> {}", history.len(), dir.display()))
}

fn model_dirs(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let dir = cfg.output_dir().join(TRAIN_DIR);
    match cfg.train.regime {
        Regime::Cps => vec![dir.join(FIRST_MODEL_DIR), dir.join(SECOND_MODEL_DIR)],
        _ => vec![dir.join(SINGLE_MODEL_DIR)],
    }
}

pub fn predict(cfg: &ExperimentConfig) -> Result<String> {
    let eval_chips = cfg.output_dir().join(CHIPS_DIR).join(EVAL_CHIPS);
    let dirs = model_dirs(cfg);
    let params: Vec<PathBuf> = dirs.iter().map(|d| d.join(PARAMS_FILE)).collect();
    let mut inputs: Vec<&Path> = params.iter().map(PathBuf::as_path).collect();
    inputs.push(&eval_chips);
    let record = StageRecord::new("predict", json!({"regime": cfg.train.regime, "batch_size": cfg.eval.batch_size}), &inputs)?;
    let models: Vec<Model32> = dirs
        .iter()
        .map(|d| load_checkpoint::<f32>(d).map(|(m, _)| m).with_context(|| format!("loading {d:?}; run train first")))
        .collect::<Result<_>>()?;
    let ds = load_dataset(&eval_chips)?;
    let refs: Vec<&Model32> = models.iter().collect();
    let chips = predict_dataset(&refs, &ds, cfg.eval.batch_size)?;
    let dir = begin(cfg, PREDICT_DIR)?;
    save_probability_chips(&chips, &dir)?;
    finish(&dir, record, &[&dir])?;
    let how = if models.len() == 2 { "ensembled over 2 models" } else { "single model" };
    Ok(format!("predict: {} probability chips ({how}) -> {}", chips.len(), dir.display()))
}

pub fn merge(cfg: &ExperimentConfig) -> Result<String> {
    let probs_dir = cfg.output_dir().join(PREDICT_DIR);
    let manifest_p = cfg.output_dir().join(CHIPS_DIR).join(EVAL_CHIPS).join(MANIFEST_FILE);
    let record = StageRecord::new("merge", json!({}), &[&probs_dir, &manifest_p])?;
    let manifest: ChipManifest = serde_json::from_str(&fs::read_to_string(&manifest_p)?)?;
    let chips = load_probability_chips::<f32>(&probs_dir).with_context(|| format!("loading {probs_dir:?}; run predict first"))?;
    let mosaic = merge_chips(&chips, manifest.source_shape, &manifest.transform, &manifest.crs_id)?;
    let dir = begin(cfg, MERGE_DIR)?;
    let (probs_p, classes_p) = (dir.join(PROBABILITIES_FILE), dir.join(CLASSES_FILE));
    write_mosaic(&mosaic, &probs_p, &classes_p)?;
    finish(&dir, record, &[&probs_p, &classes_p])?;
    let (r, c) = mosaic.shape();
    Ok(format!("merge: {} chips into a {r}x{c} mosaic -> {}", chips.len(), dir.display()))
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<String> {
    let probs_p = cfg.output_dir().join(MERGE_DIR).join(PROBABILITIES_FILE);
    let gt_p = path(&cfg.paths.ground_truth);
    let record = StageRecord::new("evaluate", section(&cfg.eval), &[&probs_p, gt_p])?;
    let mosaic = read_mosaic(&probs_p).with_context(|| format!("reading {probs_p:?}; run merge first"))?;
    let gt = geotiff::read_label_mask(gt_p).with_context(|| format!("reading ground truth {gt_p:?}"))?;
    let name = serde_json::to_value(cfg.train.regime)?.as_str().unwrap_or("model").to_string();
    let report = RecallReport::evaluate(&name, &mosaic, &gt, &cfg.eval.thresholds)?;
    let dir = begin(cfg, EVAL_DIR)?;
    let (json_p, table_p) = (dir.join(REPORT_JSON), dir.join(REPORT_TABLE));
    fs::write(&json_p, report.to_json()?)?;
    let table = report.to_table();
    fs::write(&table_p, &table)?;
    finish(&dir, record, &[&json_p, &table_p])?;
    Ok(format!("evaluate: recall report -> {}\n{table}", dir.display()))
}

pub fn run_stage(name: &str, cfg: &ExperimentConfig) -> Result<String> {
    match name {
        "synth" => synth(cfg),
        "rasterize" => rasterize(cfg),
        "chip" => chip(cfg),
        "train" => train(cfg),
        "predict" => predict(cfg),
        "merge" => merge(cfg),
        "evaluate" => evaluate(cfg),
        other => anyhow::bail!("unknown stage `{other}`"),
    }
}
