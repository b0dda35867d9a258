//! One-sided Hausdorff estimate by repeated soft erosion of the squared error map.
//!
//! For each class plane the error map `e0 = (p - y)^2` is eroded `n` times with
//! `e_k = cross(e_{k-1}) * e_{k-1}`, where `cross` averages a pixel with its four
//! neighbours (zero padded). Errors that belong to large connected regions survive
//! more erosions, and iteration `k` is weighted by `k^exponent`.

use ndarray::{Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{check_targets, softmax, softmax_backward, ClassTargets, ClassWeights, LossOutput, PredictionLogits};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HausdorffParams {
    pub erosions: usize,
    pub exponent: f64,
}

impl Default for HausdorffParams {
    fn default() -> Self {
        Self { erosions: 10, exponent: 2.0 }
    }
}

impl HausdorffParams {
    pub fn validate(&self) -> Result<()> {
        if self.erosions == 0 || !(self.exponent >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "hausdorff needs erosions >= 1 and exponent >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `dst = cross(src)`: mean of a pixel and its 4-neighbourhood, zero outside.
///
/// The operator is symmetric, so it is also its own adjoint.
fn cross_mean<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize) {
    let fifth = T::of(0.2);
    let zeros = vec![T::zero(); w];
    for i in 0..h {
        let row = &src[i * w..(i + 1) * w];
        let up = if i > 0 { &src[(i - 1) * w..i * w] } else { &zeros[..] };
        let down = if i + 1 < h { &src[(i + 1) * w..(i + 2) * w] } else { &zeros[..] };
        let d = &mut dst[i * w..(i + 1) * w];
        if w == 1 {
            d[0] = (row[0] + up[0] + down[0]) * fifth;
            continue;
        }
        d[0] = (row[0] + up[0] + down[0] + row[1]) * fifth;
        d[w - 1] = (row[w - 1] + up[w - 1] + down[w - 1] + row[w - 2]) * fifth;
        let inner = d[1..w - 1].iter_mut().zip(&row[1..w - 1]).zip(&up[1..w - 1]).zip(&down[1..w - 1]);
        for ((((d, &c), &u), &dn), (&l, &r)) in inner.zip(row[..w - 2].iter().zip(&row[2..])) {
            *d = (c + u + dn + l + r) * fifth;
        }
    }
}

/// One soft-erosion step on a single plane.
pub fn soft_erode<T: Scalar>(plane: ArrayView2<'_, T>) -> Array2<T> {
    let (h, w) = plane.dim();
    let src: Vec<T> = plane.iter().copied().collect();
    let mut c = vec![T::zero(); h * w];
    cross_mean(&src, &mut c, h, w);
    let out: Vec<T> = c.iter().zip(&src).map(|(a, b)| *a * *b).collect();
    Array2::from_shape_vec((h, w), out).expect("shape preserved")
}

/// Reusable buffers for [`plane_loss`]: `maps[k] = e_k`, `crosses[k] = cross(e_k)`.
struct Workspace<T> {
    maps: Vec<Vec<T>>,
    crosses: Vec<Vec<T>>,
    ge: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn new(n: usize, len: usize) -> Self {
        Self {
            maps: vec![vec![T::zero(); len]; n + 1],
            crosses: vec![vec![T::zero(); len]; n],
            ge: vec![T::zero(); len],
            tmp: vec![T::zero(); len],
        }
    }
}

/// Repeated erosion drives small errors towards zero doubly exponentially; values
/// below the smallest normal number are flushed so the loop never touches subnormals,
/// whose arithmetic is orders of magnitude slower. The change is below any
/// representable contribution to the loss.
#[inline]
fn flush<T: Scalar>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

/// Sum with eight independent accumulators so the loop vectorizes.
fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail: T = chunks.remainder().iter().copied().sum();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Loss of the error plane stored in `ws.maps[0]`; its gradient is written to `g`.
fn plane_loss<T: Scalar>(ws: &mut Workspace<T>, h: usize, w: usize, weights: &[T], g: &mut [T]) -> T {
    let n = ws.crosses.len();
    let mut value = T::zero();
    for k in 1..=n {
        let (done, rest) = ws.maps.split_at_mut(k);
        let prev = &done[k - 1];
        let c = &mut ws.crosses[k - 1];
        cross_mean(prev, c, h, w);
        for ((next, &cv), &e) in rest[0].iter_mut().zip(c.iter()).zip(prev) {
            *next = flush(cv * e);
        }
        value += weights[k] * lane_sum(&rest[0]);
    }
    g.fill(T::zero());
    for k in (1..=n).rev() {
        let prev = &ws.maps[k - 1];
        let cross_prev = &ws.crosses[k - 1];
        // d e_k / d e_{k-1}: cross^T(g * e_{k-1}) + g * cross(e_{k-1}), with g += k^a first.
        for ((v, x), &p) in g.iter_mut().zip(ws.ge.iter_mut()).zip(prev) {
            *v += weights[k];
            *x = flush(*v * p);
        }
        cross_mean(&ws.ge, &mut ws.tmp, h, w);
        for ((v, &t), &c) in g.iter_mut().zip(&ws.tmp).zip(cross_prev) {
            *v = flush(t + *v * c);
        }
    }
    value
}

/// Class-weighted erosion Hausdorff loss, summed over batch, classes and pixels and
/// divided by `k`.
pub fn hausdorff_erosion<T: Scalar, Y: ClassTargets + ?Sized>(
    logits: &PredictionLogits<T>,
    targets: &Y,
    alpha: &ClassWeights,
    params: &HausdorffParams,
    k: f64,
) -> Result<LossOutput<T>> {
    params.validate()?;
    let targets = targets.class_indices();
    check_targets(logits, &targets)?;
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("normalization constant must be positive, got {k}")));
    }
    let probs = softmax(&logits.values);
    let (b, c, h, w) = probs.dim();
    let weights: Vec<T> = (0..=params.erosions).map(|i| T::of((i as f64).powf(params.exponent))).collect();
    let inv_k = T::of(1.0 / k);
    let mut grad_p = Array4::<T>::zeros(probs.raw_dim());
    let mut total = T::zero();
    let mut ws = Workspace::new(params.erosions, h * w);
    let mut diff = vec![T::zero(); h * w];
    let mut g = vec![T::zero(); h * w];
    for bi in 0..b {
        for ci in 0..c {
            let a = T::of(alpha.get(ci));
            let planes = probs.slice(ndarray::s![bi, ci, .., ..]);
            let labels = targets.slice(ndarray::s![bi, .., ..]);
            for (((d, e), &p), &y) in diff.iter_mut().zip(ws.maps[0].iter_mut()).zip(planes.iter()).zip(labels.iter()) {
                *d = if y as usize == ci { p - T::one() } else { p };
                *e = *d * *d;
            }
            total += a * plane_loss(&mut ws, h, w, &weights, &mut g);
            let scale = a * inv_k * T::of(2.0);
            for ((dst, &gv), &d) in grad_p.slice_mut(ndarray::s![bi, ci, .., ..]).iter_mut().zip(&g).zip(&diff) {
                *dst = scale * gv * d;
            }
        }
    }
    let grad = softmax_backward(&probs, &grad_p);
    Ok(LossOutput { value: total * inv_k, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Literal loop: erode with explicit neighbour lookups, accumulate k^a * sum(e_k).
    pub(crate) fn reference_plane(e0: &[Vec<f64>], erosions: usize, exponent: f64) -> f64 {
        let h = e0.len();
        let w = e0[0].len();
        let mut e = e0.to_vec();
        let mut loss = 0.0;
        for k in 1..=erosions {
            let get = |m: &Vec<Vec<f64>>, i: isize, j: isize| {
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    0.0
                } else {
                    m[i as usize][j as usize]
                }
            };
            let mut next = vec![vec![0.0; w]; h];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let conv = (get(&e, i, j) + get(&e, i - 1, j) + get(&e, i + 1, j) + get(&e, i, j - 1) + get(&e, i, j + 1)) / 5.0;
                    next[i as usize][j as usize] = conv * get(&e, i, j);
                }
            }
            e = next;
            loss += (k as f64).powf(exponent) * e.iter().flatten().sum::<f64>();
        }
        loss
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| ((i + j) % 5) as u8);
        let mut z = Array4::<f64>::from_elem((1, 5, 4, 4), -200.0);
        for ((_, i, j), c) in t.indexed_iter() {
            z[[0, *c as usize, i, j]] = 200.0;
        }
        let out = hausdorff_erosion(&PredictionLogits::new(z).unwrap(), &t, &ClassWeights::uniform(), &HausdorffParams::default(), 16.0).unwrap();
        assert_eq!(out.value, 0.0);
    }

    /// Logits that put probability ~1 on `pred[i][j]`.
    fn confident(pred: &Array3<u8>) -> PredictionLogits<f64> {
        let (b, h, w) = pred.dim();
        let mut z = Array4::<f64>::from_elem((b, 5, h, w), -50.0);
        for ((bi, i, j), c) in pred.indexed_iter() {
            z[[bi, *c as usize, i, j]] = 50.0;
        }
        PredictionLogits::new(z).unwrap()
    }

    #[test]
    fn deep_error_outweighs_isolated_error() {
        let gt = Array3::<u8>::from_elem((1, 8, 8), 4);
        // isolated: a single wrong pixel
        let mut isolated = gt.clone();
        isolated[[0, 4, 4]] = 0;
        // deep: a 5x5 wrong region, the center pixel sits deep inside it
        let mut deep = gt.clone();
        for i in 2..7 {
            for j in 2..7 {
                deep[[0, i, j]] = 0;
            }
        }
        let p = HausdorffParams::default();
        let alpha = ClassWeights::uniform();
        let li = hausdorff_erosion(&confident(&isolated), &gt, &alpha, &p, 64.0).unwrap().value;
        let ld = hausdorff_erosion(&confident(&deep), &gt, &alpha, &p, 64.0).unwrap().value;
        assert!(ld > li, "deep {ld} vs isolated {li}");

        // the oracle sees the same ordering on the raw error planes
        let plane = |m: &Array3<u8>| -> Vec<Vec<f64>> {
            (0..8).map(|i| (0..8).map(|j| if m[[0, i, j]] != 4 { 1.0 } else { 0.0 }).collect()).collect()
        };
        let oi = 2.0 * reference_plane(&plane(&isolated), 10, 2.0) / 64.0;
        let od = 2.0 * reference_plane(&plane(&deep), 10, 2.0) / 64.0;
        assert!((li - oi).abs() < 1e-9 && (ld - od).abs() < 1e-9, "{li} {oi} {ld} {od}");
    }

    #[test]
    fn uniform_prediction_matches_oracle() {
        let gt = Array3::from_shape_fn((1, 6, 6), |(_, i, j)| if i < 3 && j < 4 { 0u8 } else { 4u8 });
        let z = PredictionLogits::new(Array4::<f64>::zeros((1, 5, 6, 6))).unwrap();
        let p = HausdorffParams::default();
        let alpha = ClassWeights::new([2.0, 1.0, 1.0, 0.5, 0.3]).unwrap();
        let out = hausdorff_erosion(&z, &gt, &alpha, &p, 36.0).unwrap();
        let mut expected = 0.0;
        for c in 0..5u8 {
            let e0: Vec<Vec<f64>> = (0..6)
                .map(|i| (0..6).map(|j| { let y = if gt[[0, i, j]] == c { 1.0 } else { 0.0 }; (0.2f64 - y).powi(2) }).collect())
                .collect();
            expected += alpha.alpha[c as usize] * reference_plane(&e0, 10, 2.0);
        }
        assert!((out.value - expected / 36.0).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn soft_erode_shrinks_support() {
        let mut m = Array2::<f64>::zeros((5, 5));
        m[[2, 2]] = 1.0;
        m[[2, 3]] = 1.0;
        let e = soft_erode(m.view());
        assert!((e[[2, 2]] - 0.4).abs() < 1e-15);
        assert_eq!(e[[1, 2]], 0.0);
    }

    #[test]
    fn invalid_params() {
        assert!(HausdorffParams { erosions: 0, exponent: 2.0 }.validate().is_err());
        assert!(HausdorffParams { erosions: 3, exponent: -1.0 }.validate().is_err());
    }
}
