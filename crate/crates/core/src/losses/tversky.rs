use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{check_targets, softmax, softmax_backward, ClassTargets, LossOutput, PredictionLogits};
use crate::error::{Error, Result};
use crate::geo::NUM_CLASSES;
use crate::Scalar;

/// `a` weighs false positives, `b` false negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TverskyParams {
    pub a: f64,
    pub b: f64,
    pub smooth: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self { a: 0.3, b: 0.7, smooth: 1.0 }
    }
}

/// Soft multi-class Tversky loss: mean over classes of `1 - TI_w` with
/// `TI_w = (TP + s) / (TP + a FP + b FN + s)` on softmax probabilities, counts summed
/// over the whole batch.
pub fn tversky_loss<T: Scalar, Y: ClassTargets + ?Sized>(
    logits: &PredictionLogits<T>,
    targets: &Y,
    params: &TverskyParams,
) -> Result<LossOutput<T>> {
    if !(params.a > 0.0 && params.b > 0.0 && params.smooth >= 0.0) {
        return Err(Error::InvalidParameter(format!("tversky needs a, b > 0 and smooth >= 0: {params:?}")));
    }
    let targets = targets.class_indices();
    check_targets(logits, &targets)?;
    let probs = softmax(&logits.values);
    let (b, c, h, w) = probs.dim();
    let (pa, pb, s) = (T::of(params.a), T::of(params.b), T::of(params.smooth));
    let mut tp = [T::zero(); NUM_CLASSES];
    let mut fp = [T::zero(); NUM_CLASSES];
    let mut fne = [T::zero(); NUM_CLASSES];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let t = targets[[bi, i, j]] as usize;
                for ci in 0..c {
                    let p = probs[[bi, ci, i, j]];
                    if ci == t {
                        tp[ci] += p;
                        fne[ci] += T::one() - p;
                    } else {
                        fp[ci] += p;
                    }
                }
            }
        }
    }
    let inv_c = T::one() / T::of(c as f64);
    let mut value = T::zero();
    // d(loss)/dp for y = 1 and y = 0 pixels, per class
    let mut d_pos = [T::zero(); NUM_CLASSES];
    let mut d_neg = [T::zero(); NUM_CLASSES];
    for ci in 0..c {
        let num = tp[ci] + s;
        let den = tp[ci] + pa * fp[ci] + pb * fne[ci] + s;
        value += T::one() - num / den;
        let den2 = den * den;
        d_pos[ci] = -inv_c * ((den - num) + pb * num) / den2;
        d_neg[ci] = inv_c * pa * num / den2;
    }
    let mut grad_p = Array4::<T>::zeros(probs.raw_dim());
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let t = targets[[bi, i, j]] as usize;
                for ci in 0..c {
                    grad_p[[bi, ci, i, j]] = if ci == t { d_pos[ci] } else { d_neg[ci] };
                }
            }
        }
    }
    Ok(LossOutput { value: value * inv_c, grad: softmax_backward(&probs, &grad_p) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn random(seed: u64) -> (PredictionLogits<f64>, Array3<u8>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Array4::from_shape_fn((1, 5, 2, 2), |_| rng.gen_range(-2.0..2.0));
        let t = Array3::from_shape_fn((1, 2, 2), |_| rng.gen_range(0..5u8));
        (PredictionLogits::new(z).unwrap(), t)
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| ((i * 3 + j) % 5) as u8);
        let mut z = Array4::<f64>::from_elem((1, 5, 3, 3), -100.0);
        for ((_, i, j), c) in t.indexed_iter() {
            z[[0, *c as usize, i, j]] = 100.0;
        }
        let out = tversky_loss(&PredictionLogits::new(z).unwrap(), &t, &TverskyParams::default()).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn half_half_reduces_to_dice() {
        for seed in 0..10 {
            let (z, t) = random(seed);
            let p = z.softmax();
            let smooth = 1.0;
            let out = tversky_loss(&z, &t, &TverskyParams { a: 0.5, b: 0.5, smooth }).unwrap();
            let mut dice = 0.0;
            for c in 0..5 {
                let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
                for ((_, i, j), tc) in t.indexed_iter() {
                    let y = (*tc as usize == c) as u8 as f64;
                    inter += p[[0, c, i, j]] * y;
                    sp += p[[0, c, i, j]];
                    sy += y;
                }
                dice += 1.0 - (2.0 * inter + 2.0 * smooth) / (sp + sy + 2.0 * smooth);
            }
            assert!((out.value - dice / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_counted_confusion() {
        let (z, t) = random(42);
        let p = z.softmax();
        let prm = TverskyParams::default();
        let mut expected = 0.0;
        for c in 0..5 {
            let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
            for i in 0..2 {
                for j in 0..2 {
                    let y = if t[[0, i, j]] as usize == c { 1.0 } else { 0.0 };
                    let q = p[[0, c, i, j]];
                    tp += q * y;
                    fp += q * (1.0 - y);
                    fne += (1.0 - q) * y;
                }
            }
            expected += 1.0 - (tp + 1.0) / (tp + 0.3 * fp + 0.7 * fne + 1.0);
        }
        let out = tversky_loss(&z, &t, &prm).unwrap();
        assert!((out.value - expected / 5.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let (z, t) = random(0);
        assert!(tversky_loss(&z, &t, &TverskyParams { a: 0.0, b: 0.7, smooth: 1.0 }).is_err());
    }
}
