use ndarray::Array4;

use super::{
    check_same_shape, hausdorff_erosion, weighted_ce, ClassTargets, ClassWeights, HausdorffParams, PredictionLogits,
};
use crate::error::{Error, Result};
use crate::Scalar;

/// Relative weight of the cross-entropy term in the supervised objective.
pub const WCE_FACTOR: f64 = 0.5;

/// `K = |D| * W * H`.
pub fn normalization_constant(ds_size: usize, width: usize, height: usize) -> f64 {
    (ds_size as f64) * (width as f64) * (height as f64)
}

/// `L_sup = L_hf + 0.5 L_wce`.
pub fn compose_supervised<T: Scalar>(hausdorff: T, wce: T) -> T {
    hausdorff + T::of(WCE_FACTOR) * wce
}

/// `L_total = L_sup + lambda L_cps`.
pub fn total_loss<T: Scalar>(supervised: T, cps: T, lambda: f64) -> Result<T> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(supervised + T::of(lambda) * cps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedComponents<T> {
    /// Hausdorff term summed over both networks.
    pub hausdorff: T,
    /// Weighted cross-entropy summed over both networks.
    pub wce: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedLoss<T> {
    pub value: T,
    pub components: SupervisedComponents<T>,
    pub grad_first: Array4<T>,
    pub grad_second: Array4<T>,
}

/// Supervised objective for the two-network setup against the same labels.
pub fn supervised_loss<T: Scalar, Y: ClassTargets + ?Sized>(
    first: &PredictionLogits<T>,
    second: &PredictionLogits<T>,
    targets: &Y,
    alpha: &ClassWeights,
    params: &HausdorffParams,
    k: f64,
) -> Result<SupervisedLoss<T>> {
    check_same_shape(first, second)?;
    let hd1 = hausdorff_erosion(first, targets, alpha, params, k)?;
    let hd2 = hausdorff_erosion(second, targets, alpha, params, k)?;
    let ce1 = weighted_ce(first, targets, alpha, k)?;
    let ce2 = weighted_ce(second, targets, alpha, k)?;
    let components = SupervisedComponents { hausdorff: hd1.value + hd2.value, wce: ce1.value + ce2.value };
    let f = T::of(WCE_FACTOR);
    let grad_first = hd1.grad + &(ce1.grad * f);
    let grad_second = hd2.grad + &(ce2.grad * f);
    Ok(SupervisedLoss {
        value: compose_supervised(components.hausdorff, components.wce),
        components,
        grad_first,
        grad_second,
    })
}
