use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

/// Losses of one epoch, averaged over batches weighted by batch size.
///
/// Components that the regime does not use are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub hausdorff: Option<f64>,
    pub wce: Option<f64>,
    pub cps: Option<f64>,
    pub tversky: Option<f64>,
    pub total: f64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// Every recorded quantity except wall time.
    pub fn losses(&self) -> [Option<f64>; 6] {
        [Some(self.lambda), self.hausdorff, self.wce, self.cps, self.tversky, Some(self.total)]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda).collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// Loss sequence without timings, for determinism comparisons.
    pub fn loss_sequence(&self) -> Vec<[Option<f64>; 6]> {
        self.records.iter().map(EpochRecord::losses).collect()
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let h = TrainHistory {
            records: (0..3)
                .map(|e| EpochRecord {
                    epoch: e,
                    lambda: e as f64 * 0.01,
                    hausdorff: Some(1.5),
                    wce: Some(0.25),
                    cps: None,
                    tversky: None,
                    total: 1.625,
                    wall_time_s: 0.1,
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.jsonl");
        h.write_jsonl(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 3);
        assert_eq!(TrainHistory::read_jsonl(&p).unwrap(), h);
    }
}
