//! Training loops for cross pseudo supervision and the two single-network baselines.

mod config;
mod history;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chipper::{ChipDataset, DatasetMode};
use crate::losses::{
    class_weights_from_dataset, compose_supervised, cps_loss, hausdorff_erosion, normalization_constant,
    supervised_loss, total_loss, tversky_loss, weighted_ce, ClassWeights, HausdorffParams, TverskyParams, WCE_FACTOR,
};
use crate::models::{build_model, save_checkpoint, SegmentationModel};
use crate::nn::{Grads, Optimizer};
use crate::{Error, Result, Scalar};

pub use config::{OptimizerName, Regime, TrainConfig};
pub use history::{EpochRecord, TrainHistory};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const FIRST_MODEL_DIR: &str = "model_1";
pub const SECOND_MODEL_DIR: &str = "model_2";
pub const SINGLE_MODEL_DIR: &str = "model";

/// Stacks dataset records into a `[B, 4, H, W]` image batch and `[B, H, W]` labels.
pub fn collate<T: Scalar>(ds: &ChipDataset, indices: &[usize]) -> (Array4<T>, Array3<u8>) {
    let images: Vec<_> = indices.iter().map(|&i| ds.records[i].image.view()).collect();
    let labels: Vec<_> = indices.iter().map(|&i| ds.records[i].label.view()).collect();
    let x = ndarray::stack(Axis(0), &images).expect("chips share a shape");
    let y = ndarray::stack(Axis(0), &labels).expect("chips share a shape");
    (x.mapv(|v| T::of(v as f64)), y)
}

/// Deterministic batch order for an epoch, derived from `(seed, epoch)` only.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn k_for(x: &ArrayView4<'_, impl Sized>) -> f64 {
    let (b, _, h, w) = x.dim();
    normalization_constant(b, w, h)
}

/// Loss values and parameter gradients of one joint step.
#[derive(Debug, Clone)]
pub struct CpsStep<T> {
    pub hausdorff: T,
    pub wce: T,
    pub cps: T,
    pub supervised: T,
    pub total: T,
    pub grads_first: Grads<T>,
    pub grads_second: Grads<T>,
}

/// Forward both networks, combine supervised and pseudo-supervision losses with
/// weight `lambda`, and back-propagate into each network.
#[allow(clippy::too_many_arguments)]
pub fn cps_step<T: Scalar>(
    first: &SegmentationModel<T>,
    second: &SegmentationModel<T>,
    x: ArrayView4<'_, T>,
    y: &Array3<u8>,
    alpha: &ClassWeights,
    hausdorff: &HausdorffParams,
    lambda: f64,
) -> Result<CpsStep<T>> {
    let k = k_for(&x);
    let p1 = first.forward_train(x.view())?;
    let p2 = second.forward_train(x.view())?;
    let sup = supervised_loss(&p1.logits, &p2.logits, y, alpha, hausdorff, k)?;
    let cps = cps_loss(&p1.logits, &p2.logits, alpha, k)?;
    let total = total_loss(sup.value, cps.value, lambda)?;
    let l = T::of(lambda);
    let g1 = sup.grad_first + &(cps.grad_first * l);
    let g2 = sup.grad_second + &(cps.grad_second * l);
    Ok(CpsStep {
        hausdorff: sup.components.hausdorff,
        wce: sup.components.wce,
        cps: cps.value,
        supervised: sup.value,
        total,
        grads_first: p1.backward(&g1),
        grads_second: p2.backward(&g2),
    })
}

/// Objective of a single network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SingleObjective {
    /// Hausdorff erosion plus half-weighted cross-entropy (one half of the joint supervised loss).
    HausdorffWce(HausdorffParams),
    WeightedCe,
    Tversky(TverskyParams),
}

#[derive(Debug, Clone)]
pub struct SingleStep<T> {
    pub hausdorff: Option<T>,
    pub wce: Option<T>,
    pub tversky: Option<T>,
    pub total: T,
    pub grads: Grads<T>,
}

pub fn single_step<T: Scalar>(
    model: &SegmentationModel<T>,
    x: ArrayView4<'_, T>,
    y: &Array3<u8>,
    alpha: &ClassWeights,
    objective: &SingleObjective,
) -> Result<SingleStep<T>> {
    let k = k_for(&x);
    let p = model.forward_train(x.view())?;
    let (hausdorff, wce, tversky, total, grad) = match objective {
        SingleObjective::HausdorffWce(hp) => {
            let hd = hausdorff_erosion(&p.logits, y, alpha, hp, k)?;
            let ce = weighted_ce(&p.logits, y, alpha, k)?;
            let total = compose_supervised(hd.value, ce.value);
            (Some(hd.value), Some(ce.value), None, total, hd.grad + &(ce.grad * T::of(WCE_FACTOR)))
        }
        SingleObjective::WeightedCe => {
            let ce = weighted_ce(&p.logits, y, alpha, k)?;
            (None, Some(ce.value), None, ce.value, ce.grad)
        }
        SingleObjective::Tversky(tp) => {
            let tv = tversky_loss(&p.logits, y, tp)?;
            (None, None, Some(tv.value), tv.value, tv.grad)
        }
    };
    Ok(SingleStep { hausdorff, wce, tversky, total, grads: p.backward(&grad) })
}

/// Result of [`train_cps`].
#[derive(Debug, Clone)]
pub struct CpsOutcome<T> {
    pub first: SegmentationModel<T>,
    pub second: SegmentationModel<T>,
    pub history: TrainHistory,
    pub class_weights: ClassWeights,
    /// Checkpoint directories of both networks when `checkpoint_dir` is set.
    pub checkpoints: Option<(PathBuf, PathBuf)>,
}

/// Result of [`train_supervised`].
#[derive(Debug, Clone)]
pub struct SupervisedOutcome<T> {
    pub model: SegmentationModel<T>,
    pub history: TrainHistory,
    pub class_weights: ClassWeights,
    pub checkpoint: Option<PathBuf>,
}

fn check_dataset(ds: &ChipDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.mode != DatasetMode::Train {
        return Err(Error::InvalidParameter("training requires a dataset built in train mode".into()));
    }
    Ok(())
}

/// Running, batch-size-weighted epoch averages.
#[derive(Default)]
struct Accum {
    n: f64,
    hausdorff: Option<f64>,
    wce: Option<f64>,
    cps: Option<f64>,
    tversky: Option<f64>,
    total: f64,
}

impl Accum {
    fn add(slot: &mut Option<f64>, v: Option<f64>, w: f64) {
        if let Some(v) = v {
            *slot = Some(slot.unwrap_or(0.0) + v * w);
        }
    }

    fn push(&mut self, w: usize, hausdorff: Option<f64>, wce: Option<f64>, cps: Option<f64>, tversky: Option<f64>, total: f64) {
        let w = w as f64;
        self.n += w;
        Self::add(&mut self.hausdorff, hausdorff, w);
        Self::add(&mut self.wce, wce, w);
        Self::add(&mut self.cps, cps, w);
        Self::add(&mut self.tversky, tversky, w);
        self.total += total * w;
    }

    fn record(self, epoch: usize, lambda: f64, started: Instant) -> EpochRecord {
        let n = self.n;
        EpochRecord {
            epoch,
            lambda,
            hausdorff: self.hausdorff.map(|v| v / n),
            wce: self.wce.map(|v| v / n),
            cps: self.cps.map(|v| v / n),
            tversky: self.tversky.map(|v| v / n),
            total: self.total / n,
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    }
}

fn persist<T: Scalar>(
    dir: &Path,
    models: &[(&SegmentationModel<T>, &str)],
    epoch: usize,
    history: &TrainHistory,
) -> Result<()> {
    let hv = serde_json::to_value(history)?;
    for (m, name) in models {
        save_checkpoint(*m, &dir.join(name), epoch, hv.clone())?;
    }
    history.write_jsonl(&dir.join(HISTORY_FILE))
}

/// Joint training of two differently-seeded networks.
///
/// Each epoch uses `lambda = rampup(t)`; every batch contributes supervised and
/// pseudo-supervision terms, and one optimizer per network applies the update.
/// Class weights are computed once from `ds` before the first epoch.
pub fn train_cps<T: Scalar>(cfg: &TrainConfig, ds: &ChipDataset) -> Result<CpsOutcome<T>> {
    if cfg.regime != Regime::Cps {
        return Err(Error::InvalidParameter(format!("train_cps needs regime cps, got {:?}", cfg.regime)));
    }
    cfg.validate()?;
    check_dataset(ds)?;
    let alpha = class_weights_from_dataset(ds, cfg.weight_cap)?;
    let mut first = build_model::<T>(&cfg.model_config(cfg.seed_pair.0))?;
    let mut second = build_model::<T>(&cfg.model_config(cfg.seed_pair.1))?;
    let mut opt1 = Optimizer::new(cfg.optimizer_kind(), first.params());
    let mut opt2 = Optimizer::new(cfg.optimizer_kind(), second.params());
    let schedule = cfg.schedule();
    let mut history = TrainHistory::default();
    let mut last_good = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lambda = schedule.lambda(epoch);
        let mut acc = Accum::default();
        for batch in batch_order(ds.len(), cfg.batch_size, cfg.seed_pair.0, epoch) {
            let (x, y) = collate::<T>(ds, &batch);
            let step = cps_step(&first, &second, x.view(), &y, &alpha, &cfg.hausdorff, lambda)?;
            if !step.total.is_finite() || !step.grads_first.is_finite() || !step.grads_second.is_finite() {
                return Err(Error::DivergedLoss { epoch, checkpoint: last_good });
            }
            opt1.step(first.params_mut(), &step.grads_first);
            opt2.step(second.params_mut(), &step.grads_second);
            let f = |v: T| Some(v.to_f64_lossy());
            acc.push(batch.len(), f(step.hausdorff), f(step.wce), f(step.cps), None, step.total.to_f64_lossy());
        }
        history.records.push(acc.record(epoch, lambda, started));
        if let Some(dir) = &cfg.checkpoint_dir {
            persist(dir, &[(&first, FIRST_MODEL_DIR), (&second, SECOND_MODEL_DIR)], epoch, &history)?;
            last_good = Some(dir.clone());
        }
    }
    let checkpoints = cfg.checkpoint_dir.as_ref().map(|d| (d.join(FIRST_MODEL_DIR), d.join(SECOND_MODEL_DIR)));
    Ok(CpsOutcome { first, second, history, class_weights: alpha, checkpoints })
}

/// Single-network baseline training (`unet_wce` or `deeplab_tversky`).
pub fn train_supervised<T: Scalar>(cfg: &TrainConfig, ds: &ChipDataset) -> Result<SupervisedOutcome<T>> {
    let objective = match cfg.regime {
        Regime::UnetWce => SingleObjective::WeightedCe,
        Regime::DeeplabTversky => SingleObjective::Tversky(cfg.tversky),
        Regime::Cps => return Err(Error::InvalidParameter("train_supervised does not run regime cps".into())),
    };
    cfg.validate()?;
    check_dataset(ds)?;
    let alpha = class_weights_from_dataset(ds, cfg.weight_cap)?;
    let mut model = build_model::<T>(&cfg.model_config(cfg.seed_pair.0))?;
    let mut opt = Optimizer::new(cfg.optimizer_kind(), model.params());
    let mut history = TrainHistory::default();
    let mut last_good = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut acc = Accum::default();
        for batch in batch_order(ds.len(), cfg.batch_size, cfg.seed_pair.0, epoch) {
            let (x, y) = collate::<T>(ds, &batch);
            let step = single_step(&model, x.view(), &y, &alpha, &objective)?;
            if !step.total.is_finite() || !step.grads.is_finite() {
                return Err(Error::DivergedLoss { epoch, checkpoint: last_good });
            }
            opt.step(model.params_mut(), &step.grads);
            let f = |v: Option<T>| v.map(|v| v.to_f64_lossy());
            acc.push(batch.len(), f(step.hausdorff), f(step.wce), None, f(step.tversky), step.total.to_f64_lossy());
        }
        history.records.push(acc.record(epoch, 0.0, started));
        if let Some(dir) = &cfg.checkpoint_dir {
            persist(dir, &[(&model, SINGLE_MODEL_DIR)], epoch, &history)?;
            last_good = Some(dir.clone());
        }
    }
    let checkpoint = cfg.checkpoint_dir.as_ref().map(|d| d.join(SINGLE_MODEL_DIR));
    Ok(SupervisedOutcome { model, history, class_weights: alpha, checkpoint })
}
