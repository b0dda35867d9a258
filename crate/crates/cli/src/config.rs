//! Experiment configuration: one JSON document, dotted-path overrides, and a fully
//! materialized resolved form that is written beside every stage's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use lulc_core::chipper::ChipOptions;
use lulc_core::maskgen::{ClassPriority, DEFAULT_LINE_BUFFER_PX, DEFAULT_NDVI_THRESHOLD};
use lulc_core::synth::SceneSpec;
use lulc_core::trainer::{Regime, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const DEFAULT_OUTPUT_DIR: &str = "out";

/// Configuration problems; these map to exit status 2 and are raised before any output
/// is written.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path:?}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Parse(serde_json::Error),
    #[error("config does not match the schema: {0}")]
    Schema(serde_json::Error),
    #[error("bad override `{0}`: expected dotted.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Read { .. } => "config_read",
            Self::Parse(_) => "config_parse",
            Self::Schema(_) => "config_schema",
            Self::Override(_) => "config_override",
            Self::Invalid(_) => "config_invalid",
        }
    }
}

/// Input and output locations. Unset inputs default to the files the `synth` stage
/// writes under the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub output_dir: Option<PathBuf>,
    /// 4-band NIR, R, G, B GeoTIFF.
    pub raster: Option<PathBuf>,
    pub buildings: Option<PathBuf>,
    pub roads: Option<PathBuf>,
    pub water: Option<PathBuf>,
    /// Reference label mask for `evaluate`; defaults to the rasterized labels.
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskgenConfig {
    pub buffer_px: u32,
    pub ndvi_threshold: f64,
    pub class_priority: ClassPriority,
}

impl Default for MaskgenConfig {
    fn default() -> Self {
        Self {
            buffer_px: DEFAULT_LINE_BUFFER_PX,
            ndvi_threshold: DEFAULT_NDVI_THRESHOLD,
            class_priority: ClassPriority::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Chips per forward pass during prediction.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: lulc_core::inference::DEFAULT_THRESHOLDS.to_vec(), batch_size: 4 }
    }
}

fn default_train() -> TrainConfig {
    TrainConfig::new(Regime::Cps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub synth: SceneSpec,
    #[serde(default)]
    pub maskgen: MaskgenConfig,
    #[serde(default)]
    pub chipper: ChipOptions,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            synth: SceneSpec::default(),
            maskgen: MaskgenConfig::default(),
            chipper: ChipOptions::default(),
            train: default_train(),
            eval: EvalConfig::default(),
        }
    }
}

/// Sets `path` (dot-separated object keys) in `doc` to `raw`, parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::Override(assignment.into()))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| ConfigError::Override(assignment.into()))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; non-object values replace.
fn merge_into(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_into(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses a document with overrides applied, fills every default, and validates.
    /// Relative paths are taken relative to `base_dir`.
    pub fn from_value(doc: Value, overrides: &[String], base_dir: &Path) -> Result<Self, ConfigError> {
        let mut doc = {
            let mut defaults = serde_json::to_value(Self::default()).expect("defaults serialize");
            merge_into(&mut defaults, doc);
            defaults
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: Self = serde_json::from_value(doc).map_err(ConfigError::Schema)?;
        cfg.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let doc: Value = serde_json::from_str(&text).map_err(ConfigError::Parse)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_value(doc, overrides, base)
    }

    fn resolve(&mut self, base: &Path) {
        let p = &mut self.paths;
        let out = absolutize(base, p.output_dir.as_deref().unwrap_or(Path::new(DEFAULT_OUTPUT_DIR)));
        let synth = out.join(crate::stages::SYNTH_DIR);
        let pick = |v: &Option<PathBuf>, default: PathBuf| v.as_deref().map_or(default, |v| absolutize(base, v));
        p.raster = Some(pick(&p.raster, synth.join("image.tif")));
        p.buildings = Some(pick(&p.buildings, synth.join("buildings.geojson")));
        p.roads = Some(pick(&p.roads, synth.join("roads.geojson")));
        p.water = Some(pick(&p.water, synth.join("water.geojson")));
        p.ground_truth =
            Some(pick(&p.ground_truth, out.join(crate::stages::MASKS_DIR).join(crate::stages::LABELS_FILE)));
        p.output_dir = Some(out.clone());
        self.train.checkpoint_dir = Some(out.join(crate::stages::TRAIN_DIR));
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: lulc_core::Error| ConfigError::Invalid(e.to_string());
        self.synth.validate().map_err(invalid)?;
        self.maskgen.class_priority.validate().map_err(invalid)?;
        if !(-1.0..=1.0).contains(&self.maskgen.ndvi_threshold) {
            return Err(ConfigError::Invalid(format!("ndvi_threshold {} outside [-1, 1]", self.maskgen.ndvi_threshold)));
        }
        let c = &self.chipper;
        if c.chip_size == 0 || c.stride == 0 || c.stride > c.chip_size {
            return Err(ConfigError::Invalid(format!(
                "need chip_size >= 1 and 1 <= stride <= chip_size (got {}, {})",
                c.chip_size, c.stride
            )));
        }
        if c.chip_size % lulc_core::models::DOWNSAMPLING_FACTOR != 0 {
            return Err(ConfigError::Invalid(format!(
                "chip_size {} must be a multiple of {}",
                c.chip_size,
                lulc_core::models::DOWNSAMPLING_FACTOR
            )));
        }
        if !(0.0..=1.0).contains(&c.min_class_density) {
            return Err(ConfigError::Invalid(format!("min_class_density {} outside [0, 1]", c.min_class_density)));
        }
        self.train.validate().map_err(invalid)?;
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(ConfigError::Invalid(format!("thresholds must be non-empty and in (0, 1): {:?}", self.eval.thresholds)));
        }
        if self.eval.batch_size == 0 {
            return Err(ConfigError::Invalid("eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        self.paths.output_dir.as_deref().expect("resolved config")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn resolve(doc: Value, overrides: &[&str]) -> Result<ExperimentConfig, ConfigError> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::from_value(doc, &o, Path::new("/base"))
    }

    #[test]
    fn empty_document_materializes_defaults() {
        let cfg = resolve(json!({}), &[]).unwrap();
        assert_eq!(cfg.output_dir(), Path::new("/base/out"));
        assert_eq!(cfg.paths.raster.as_deref(), Some(Path::new("/base/out/synth/image.tif")));
        assert_eq!(cfg.train.checkpoint_dir.as_deref(), Some(Path::new("/base/out/train")));
        assert_eq!(cfg.eval.thresholds, vec![0.4, 0.5]);
        assert_eq!(cfg.chipper.chip_size, 256);
        // the resolved form re-parses to itself
        let again: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [json!({"bogus": 1}), json!({"train": {"regime": "cps", "epochz": 3}}), json!({"eval": {"x": 1}})] {
            assert!(matches!(resolve(doc, &[]), Err(ConfigError::Schema(_))));
        }
        assert!(matches!(resolve(json!({}), &["chipper.nope=3"]), Err(ConfigError::Schema(_))));
    }

    #[test]
    fn overrides_set_nested_values() {
        let cfg = resolve(json!({"train": {"regime": "cps"}}), &["train.epochs=3", "train.rampup_length=2", "train.regime=unet_wce", "paths.output_dir=runs/a"])
            .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.regime, Regime::UnetWce);
        assert_eq!(cfg.output_dir(), Path::new("/base/runs/a"));
        assert!(matches!(resolve(json!({}), &["train.epochs"]), Err(ConfigError::Override(_))));
        assert!(matches!(resolve(json!({}), &["train..x=1"]), Err(ConfigError::Override(_))));
    }

    #[test]
    fn semantic_validation() {
        assert!(matches!(resolve(json!({}), &["eval.thresholds=[0.4, 1.0]"]), Err(ConfigError::Invalid(_))));
        assert!(matches!(resolve(json!({}), &["chipper.chip_size=100", "chipper.stride=100"]), Err(ConfigError::Invalid(_))));
        let r = resolve(json!({}), &["train.epochs=0"]);
        assert!(matches!(r, Err(ConfigError::Invalid(_))), "{r:?}");
        assert!(matches!(
            resolve(json!({}), &[r#"maskgen.class_priority=["buildings","roads"]"#]),
            Err(ConfigError::Invalid(_))
        ));
    }
}
