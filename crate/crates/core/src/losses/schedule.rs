use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA_MAX: f64 = 0.1;

/// Which epoch ratio drives the exponential ramp.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampVariant {
    /// `exp(-5 (1 - t/r)^2)`: continuous at `t = r`.
    #[default]
    RampLength,
    /// `exp(-5 (1 - t/T)^2)`: the literal total-epoch form, which jumps at `t = r`
    /// whenever `r < T`.
    TotalEpochs,
}

/// Sigmoid-shaped ramp-up of the unsupervised weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampUpSchedule {
    pub rampup_length: usize,
    pub total_epochs: usize,
    pub lambda_max: f64,
    #[serde(default)]
    pub variant: RampVariant,
}

impl RampUpSchedule {
    pub fn new(rampup_length: usize, total_epochs: usize, lambda_max: f64) -> Result<Self> {
        let s = Self { rampup_length, total_epochs, lambda_max, variant: RampVariant::default() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rampup_length > self.total_epochs {
            return Err(Error::InvalidParameter(format!(
                "ramp-up length {} exceeds total epochs {}",
                self.rampup_length, self.total_epochs
            )));
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda_max must be positive, got {}", self.lambda_max)));
        }
        Ok(())
    }

    /// Weight for epoch `t` (0-based).
    pub fn lambda(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        if t > self.rampup_length {
            return self.lambda_max;
        }
        let denom = match self.variant {
            RampVariant::RampLength => self.rampup_length,
            RampVariant::TotalEpochs => self.total_epochs,
        } as f64;
        let phase = 1.0 - t as f64 / denom;
        self.lambda_max * (-5.0 * phase * phase).exp()
    }
}

/// `0` at `t = 0`, `lambda_max * exp(-5 (1 - t/r)^2)` for `1 <= t <= r`, else `lambda_max`.
pub fn rampup(r: usize, t: usize, total: usize, lambda_max: f64) -> f64 {
    RampUpSchedule { rampup_length: r, total_epochs: total, lambda_max, variant: RampVariant::RampLength }.lambda(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spot_values() {
        assert_eq!(rampup(10, 0, 50, 0.1), 0.0);
        assert_eq!(rampup(10, 15, 50, 0.1), 0.1);
        assert!((rampup(10, 5, 50, 0.1) - 0.1 * (-1.25f64).exp()).abs() < 1e-12);
        assert!((rampup(10, 5, 50, 0.1) - 0.028650).abs() < 1e-6);
        assert_eq!(rampup(10, 10, 50, 0.1), 0.1);
    }

    #[test]
    fn literal_variant_is_discontinuous() {
        let s = RampUpSchedule { rampup_length: 10, total_epochs: 50, lambda_max: 0.1, variant: RampVariant::TotalEpochs };
        let at_r = s.lambda(10);
        assert!((at_r - 0.1 * (-5.0f64 * 0.8 * 0.8).exp()).abs() < 1e-15);
        assert!(s.lambda(11) - at_r > 0.05);
    }

    #[test]
    fn zero_rampup_length_jumps_to_max() {
        assert_eq!(rampup(0, 1, 5, 0.1), 0.1);
    }

    #[test]
    fn validation() {
        assert!(RampUpSchedule::new(11, 10, 0.1).is_err());
        assert!(RampUpSchedule::new(5, 10, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(r in 0usize..40, extra in 0usize..40, lmax in 0.01f64..1.0) {
            let total = r + extra;
            let mut prev = 0.0;
            for t in 0..=total {
                let l = rampup(r, t, total, lmax);
                prop_assert!(l >= prev);
                prop_assert!((0.0..=lmax).contains(&l));
                prev = l;
            }
        }
    }
}
