use serde::{Deserialize, Serialize};

use crate::chipper::ChipDataset;
use crate::error::{Error, Result};
use crate::geo::NUM_CLASSES;

pub const DEFAULT_WEIGHT_CAP: f64 = 50.0;

/// Per-class loss weights, inversely proportional to class abundance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights {
    pub alpha: [f64; NUM_CLASSES],
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl ClassWeights {
    pub fn new(alpha: [f64; NUM_CLASSES]) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidParameter(format!("class weights must be positive and finite: {alpha:?}")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform() -> Self {
        Self { alpha: [1.0; NUM_CLASSES] }
    }

    pub fn get(&self, class: usize) -> f64 {
        self.alpha[class]
    }
}

/// `alpha_w = N_total / (5 N_w)`; absent classes get `cap`; all clipped to `[1/cap, cap]`.
pub fn class_weights_from_counts(counts: &[u64; NUM_CLASSES], cap: f64) -> Result<ClassWeights> {
    if !(cap.is_finite() && cap >= 1.0) {
        return Err(Error::InvalidParameter(format!("weight cap must be >= 1, got {cap}")));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut alpha = [0.0; NUM_CLASSES];
    for (a, &n) in alpha.iter_mut().zip(counts) {
        *a = if n == 0 { cap } else { (total as f64 / (NUM_CLASSES as f64 * n as f64)).clamp(1.0 / cap, cap) };
    }
    ClassWeights::new(alpha)
}

pub fn class_weights_from_dataset(ds: &ChipDataset, cap: f64) -> Result<ClassWeights> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    class_weights_from_counts(&ds.class_counts(), cap)
}
