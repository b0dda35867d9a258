//! Training objectives: class-weighted cross-entropy, erosion-based Hausdorff loss,
//! Tversky loss, cross pseudo supervision, and the ramp-up schedule that blends them.
//!
//! Every differentiable loss returns its value together with the gradient with
//! respect to the input logits.

mod ce;
mod combine;
mod hausdorff;
mod schedule;
mod tversky;
mod weights;

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::geo::NUM_CLASSES;
use crate::Scalar;

pub use ce::{cps_loss, one_hot_pseudo, weighted_ce, CpsLoss};
pub use combine::{
    compose_supervised, normalization_constant, supervised_loss, total_loss, SupervisedComponents, SupervisedLoss,
    WCE_FACTOR,
};
pub use hausdorff::{hausdorff_erosion, soft_erode, HausdorffParams};
pub use schedule::{rampup, RampUpSchedule, RampVariant, DEFAULT_LAMBDA_MAX};
pub use tversky::{tversky_loss, TverskyParams};
pub use weights::{class_weights_from_counts, class_weights_from_dataset, ClassWeights, DEFAULT_WEIGHT_CAP};

/// Raw network outputs `[batch, class, H, W]` with exactly five classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLogits<T> {
    pub values: Array4<T>,
}

impl<T: Scalar> PredictionLogits<T> {
    pub fn new(values: Array4<T>) -> Result<Self> {
        let (_, c, _, _) = values.dim();
        if c != NUM_CLASSES {
            return Err(Error::shape(&[NUM_CLASSES], &[c]));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    /// Per-pixel softmax over the class axis.
    pub fn softmax(&self) -> Array4<T> {
        softmax(&self.values)
    }
}

/// Per-pixel class indices `[batch, H, W]`, either ground truth or pseudo-labels.
pub trait ClassTargets {
    fn class_indices(&self) -> ArrayView3<'_, u8>;
}

impl ClassTargets for Array3<u8> {
    fn class_indices(&self) -> ArrayView3<'_, u8> {
        self.view()
    }
}

impl ClassTargets for ArrayView3<'_, u8> {
    fn class_indices(&self) -> ArrayView3<'_, u8> {
        self.view()
    }
}

/// One-hot labels derived from a prediction's per-pixel argmax; a constant target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabel {
    classes: Array3<u8>,
}

impl PseudoLabel {
    pub fn from_classes(classes: Array3<u8>) -> Self {
        Self { classes }
    }

    /// Dense one-hot encoding `[batch, class, H, W]`.
    pub fn values(&self) -> Array4<u8> {
        let (b, h, w) = self.classes.dim();
        let mut out = Array4::zeros((b, NUM_CLASSES, h, w));
        for ((bi, i, j), &c) in self.classes.indexed_iter() {
            out[[bi, c as usize, i, j]] = 1;
        }
        out
    }
}

impl ClassTargets for PseudoLabel {
    fn class_indices(&self) -> ArrayView3<'_, u8> {
        self.classes.view()
    }
}

pub(crate) fn softmax<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let mut out = logits.as_standard_layout().into_owned();
    let (_, c, h, w) = out.dim();
    let plane = h * w;
    let data = out.as_slice_mut().expect("standard layout");
    let mut m = vec![T::zero(); plane];
    let mut sum = vec![T::zero(); plane];
    for sample in data.chunks_exact_mut(c * plane) {
        m.fill(T::neg_infinity());
        for k in 0..c {
            for (m, &v) in m.iter_mut().zip(&sample[k * plane..(k + 1) * plane]) {
                *m = m.max(v);
            }
        }
        sum.fill(T::zero());
        for k in 0..c {
            for ((v, &m), s) in sample[k * plane..(k + 1) * plane].iter_mut().zip(&m).zip(sum.iter_mut()) {
                *v = (*v - m).exp();
                *s += *v;
            }
        }
        for k in 0..c {
            for (v, &s) in sample[k * plane..(k + 1) * plane].iter_mut().zip(&sum) {
                *v /= s;
            }
        }
    }
    out
}

/// Chain rule through the softmax: `dz_k = p_k (g_k - sum_j g_j p_j)`.
pub(crate) fn softmax_backward<T: Scalar>(probs: &Array4<T>, grad_probs: &Array4<T>) -> Array4<T> {
    let probs = probs.as_standard_layout();
    let grad_probs = grad_probs.as_standard_layout();
    let (_, c, h, w) = probs.dim();
    let plane = h * w;
    let mut out = Array4::zeros(probs.raw_dim());
    let p = probs.as_slice().expect("standard layout");
    let g = grad_probs.as_slice().expect("standard layout");
    let o = out.as_slice_mut().expect("standard layout");
    let mut dot = vec![T::zero(); plane];
    for ((ps, gs), os) in p.chunks_exact(c * plane).zip(g.chunks_exact(c * plane)).zip(o.chunks_exact_mut(c * plane)) {
        dot.fill(T::zero());
        for k in 0..c {
            let r = k * plane..(k + 1) * plane;
            for ((d, &pv), &gv) in dot.iter_mut().zip(&ps[r.clone()]).zip(&gs[r]) {
                *d += gv * pv;
            }
        }
        for k in 0..c {
            let r = k * plane..(k + 1) * plane;
            for (((ov, &pv), &gv), &d) in os[r.clone()].iter_mut().zip(&ps[r.clone()]).zip(&gs[r]).zip(&dot) {
                *ov = pv * (gv - d);
            }
        }
    }
    out
}

pub(crate) fn check_targets<T: Scalar>(logits: &PredictionLogits<T>, targets: &ArrayView3<'_, u8>) -> Result<()> {
    let (b, _, h, w) = logits.dim();
    if targets.dim() != (b, h, w) {
        let (tb, th, tw) = targets.dim();
        return Err(Error::shape(&[b, h, w], &[tb, th, tw]));
    }
    if let Some(v) = targets.iter().find(|v| **v as usize >= NUM_CLASSES) {
        return Err(Error::InvalidClassValue(*v));
    }
    Ok(())
}

pub(crate) fn check_same_shape<T: Scalar>(a: &PredictionLogits<T>, b: &PredictionLogits<T>) -> Result<()> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape(a.values.shape(), b.values.shape()));
    }
    Ok(())
}

/// Sum over the class axis; used by tests and invariants.
pub fn class_sums<T: Scalar>(probs: &Array4<T>) -> Array3<T> {
    probs.sum_axis(Axis(1))
}

/// Loss value with the gradient of the loss with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Array4<T>,
}
