use ndarray::{Array3, Array4};

use super::{check_same_shape, check_targets, ClassTargets, ClassWeights, LossOutput, PredictionLogits, PseudoLabel};
use crate::error::{Error, Result};
use crate::Scalar;

/// Class-weighted pixel cross-entropy, summed over samples and pixels and divided by `k`.
///
/// `value = (1/k) sum_{b,i} alpha_c * -ln softmax(P)_{c}` with `c` the target class of
/// pixel `i`. The gradient is `(alpha_c / k) (p - onehot_c)`.
pub fn weighted_ce<T: Scalar, Y: ClassTargets + ?Sized>(
    logits: &PredictionLogits<T>,
    targets: &Y,
    alpha: &ClassWeights,
    k: f64,
) -> Result<LossOutput<T>> {
    let targets = targets.class_indices();
    check_targets(logits, &targets)?;
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("normalization constant must be positive, got {k}")));
    }
    let z = logits.values.as_standard_layout();
    let targets = targets.as_standard_layout();
    let (_, c, h, w) = z.dim();
    let plane = h * w;
    let inv_k = T::of(1.0 / k);
    let alpha_t: Vec<T> = alpha.alpha.iter().map(|a| T::of(*a)).collect();
    let mut grad = Array4::<T>::zeros(z.raw_dim());
    let mut total = T::zero();
    let mut m = vec![T::zero(); plane];
    let mut sum = vec![T::zero(); plane];
    let zs = z.as_slice().expect("standard layout");
    let ts = targets.as_slice().expect("standard layout");
    let gs = grad.as_slice_mut().expect("standard layout");
    for ((zb, tb), gb) in zs.chunks_exact(c * plane).zip(ts.chunks_exact(plane)).zip(gs.chunks_exact_mut(c * plane)) {
        m.fill(T::neg_infinity());
        for ci in 0..c {
            for (m, &v) in m.iter_mut().zip(&zb[ci * plane..(ci + 1) * plane]) {
                *m = m.max(v);
            }
        }
        sum.fill(T::zero());
        for ci in 0..c {
            let r = ci * plane..(ci + 1) * plane;
            for (((e, &v), &m), s) in gb[r.clone()].iter_mut().zip(&zb[r]).zip(&m).zip(sum.iter_mut()) {
                *e = (v - m).exp();
                *s += *e;
            }
        }
        for (i, &t) in tb.iter().enumerate() {
            let t = t as usize;
            // -ln p_t = ln(sum exp(z - m)) - (z_t - m)
            let a = alpha_t[t];
            total += a * (sum[i].ln() - (zb[t * plane + i] - m[i]));
            let scale = a * inv_k;
            let inv_sum = sum[i].recip();
            for ci in 0..c {
                let g = &mut gb[ci * plane + i];
                let y = if ci == t { T::one() } else { T::zero() };
                *g = scale * (*g * inv_sum - y);
            }
        }
    }
    Ok(LossOutput { value: total * inv_k, grad })
}

/// Per-pixel argmax one-hot; ties go to the lowest class index.
pub fn one_hot_pseudo<T: Scalar>(logits: &PredictionLogits<T>) -> PseudoLabel {
    let z = logits.values.as_standard_layout();
    let (b, c, h, w) = z.dim();
    let plane = h * w;
    let mut classes = Array3::<u8>::zeros((b, h, w));
    let mut best = vec![T::zero(); plane];
    let zs = z.as_slice().expect("standard layout");
    let cs = classes.as_slice_mut().expect("standard layout");
    for (zb, cb) in zs.chunks_exact(c * plane).zip(cs.chunks_exact_mut(plane)) {
        best.copy_from_slice(&zb[..plane]);
        for ci in 1..c {
            for ((bv, cl), &v) in best.iter_mut().zip(cb.iter_mut()).zip(&zb[ci * plane..(ci + 1) * plane]) {
                if v > *bv {
                    *bv = v;
                    *cl = ci as u8;
                }
            }
        }
    }
    PseudoLabel::from_classes(classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpsLoss<T> {
    pub value: T,
    /// Gradient with respect to the first network's logits.
    pub grad_first: Array4<T>,
    /// Gradient with respect to the second network's logits.
    pub grad_second: Array4<T>,
}

/// Cross pseudo supervision: each network is trained with weighted cross-entropy
/// against the other's argmax pseudo-labels. No gradient flows through the
/// pseudo-labels.
pub fn cps_loss<T: Scalar>(
    first: &PredictionLogits<T>,
    second: &PredictionLogits<T>,
    alpha: &ClassWeights,
    k: f64,
) -> Result<CpsLoss<T>> {
    check_same_shape(first, second)?;
    let from_first = one_hot_pseudo(first);
    let from_second = one_hot_pseudo(second);
    let a = weighted_ce(first, &from_second, alpha, k)?;
    let b = weighted_ce(second, &from_first, alpha, k)?;
    Ok(CpsLoss { value: a.value + b.value, grad_first: a.grad, grad_second: b.grad })
}
