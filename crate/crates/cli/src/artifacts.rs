//! Content hashes of stage inputs, per-stage provenance records, and the output lock.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const STAGE_RECORD_FILE: &str = "stage.json";
pub const LOCK_FILE: &str = ".lulc.lock";

fn hex(digest: impl AsRef<[u8]>) -> String {
    digest.as_ref().iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file, or of a directory tree (relative names and contents, in sorted
/// order). Stage records and the lock file are excluded.
pub fn hash_path(path: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    feed(&mut h, path, Path::new(""))?;
    Ok(hex(h.finalize()))
}

fn feed(h: &mut Sha256, path: &Path, rel: &Path) -> io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)?.collect::<io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let name = e.file_name();
            if name == STAGE_RECORD_FILE || name == LOCK_FILE || name == crate::config::RESOLVED_CONFIG_FILE {
                continue;
            }
            feed(h, &e.path(), &rel.join(&name))?;
        }
    } else {
        let bytes = fs::read(path)?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of one stage run. `key` addresses the outputs by the stage's resolved
/// config section and the digests of everything it read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<InputDigest>,
}

impl StageRecord {
    pub fn new(stage: &str, config: Value, inputs: &[&Path]) -> io::Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.to_path_buf(), sha256: hash_path(p)? }))
            .collect::<io::Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update(serde_json::to_vec(&config).expect("json value serializes"));
        for i in &inputs {
            h.update(i.sha256.as_bytes());
        }
        Ok(Self { stage: stage.into(), key: hex(h.finalize()), config, inputs, outputs: Vec::new() })
    }

    pub fn with_outputs(mut self, outputs: &[&Path]) -> io::Result<Self> {
        self.outputs = outputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.to_path_buf(), sha256: hash_path(p)? }))
            .collect::<io::Result<_>>()?;
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("record serializes") + "\n";
        fs::write(dir.join(STAGE_RECORD_FILE), text)
    }

    pub fn read(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join(STAGE_RECORD_FILE))?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::AlreadyExists {
                io::Error::new(e.kind(), format!("output directory is locked by {path:?}"))
            } else {
                e
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
