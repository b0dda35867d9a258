use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig, SegmentationModel};
use crate::{Error, Result, Scalar};

pub const DESCRIPTOR_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

/// Location of one tensor inside the parameter blob; `offset` counts elements, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDescriptor {
    pub format_version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    /// Free-form metric history supplied by the trainer.
    pub history: serde_json::Value,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `dir/params.bin` (little-endian f32) and `dir/checkpoint.json`.
pub fn save_checkpoint<T: Scalar>(
    model: &SegmentationModel<T>,
    dir: &Path,
    epoch: usize,
    history: serde_json::Value,
) -> Result<CheckpointDescriptor> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.parameter_count() * 4);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (info, values) in model.params().tensors() {
        tensors.push(TensorEntry { name: info.name.clone(), shape: info.shape.clone(), offset });
        offset += values.len();
        for v in values {
            blob.extend_from_slice(&v.to_le_f32_bytes());
        }
    }
    let desc = CheckpointDescriptor {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        epoch,
        history,
        dtype: DTYPE.to_string(),
        tensors,
    };
    fs::File::create(dir.join(PARAMS_FILE))?.write_all(&blob)?;
    fs::write(dir.join(DESCRIPTOR_FILE), serde_json::to_vec_pretty(&desc)?)?;
    Ok(desc)
}

/// Rebuilds the network from the stored config and overwrites its parameters.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(SegmentationModel<T>, CheckpointDescriptor)> {
    let desc_path = dir.join(DESCRIPTOR_FILE);
    let desc: CheckpointDescriptor = serde_json::from_slice(&fs::read(&desc_path)?)?;
    if desc.format_version != FORMAT_VERSION || desc.dtype != DTYPE {
        return Err(Error::format(
            &desc_path,
            format!("unsupported format {} / dtype {}", desc.format_version, desc.dtype),
        ));
    }
    let mut model = build_model::<T>(&desc.config)?;
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path)?;
    if blob.len() != model.parameter_count() * 4 || desc.tensors.len() != model.params().len() {
        return Err(Error::format(&blob_path, "parameter blob does not match the network"));
    }
    let infos = model.params().infos().to_vec();
    for ((entry, info), dst) in desc.tensors.iter().zip(&infos).zip(model.params_mut().tensors_mut()) {
        if entry.name != info.name || entry.shape != info.shape {
            return Err(Error::format(&desc_path, format!("tensor {} does not match {}", entry.name, info.name)));
        }
        let bytes = &blob[entry.offset * 4..(entry.offset + dst.len()) * 4];
        for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *d = T::from_le_f32_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok((model, desc))
}
