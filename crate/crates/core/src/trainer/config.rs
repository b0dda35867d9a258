use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::losses::{HausdorffParams, RampUpSchedule, RampVariant, TverskyParams, DEFAULT_LAMBDA_MAX, DEFAULT_WEIGHT_CAP};
use crate::models::{Architecture, ModelConfig};
use crate::nn::OptimizerKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Two deeplab networks trained jointly with cross pseudo supervision.
    Cps,
    /// Single U-Net with class-weighted cross-entropy.
    UnetWce,
    /// Single deeplab network with Tversky loss.
    DeeplabTversky,
}

impl Regime {
    pub fn architecture(self) -> Architecture {
        match self {
            Self::UnetWce => Architecture::Unet,
            Self::Cps | Self::DeeplabTversky => Architecture::Deeplab,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    SgdMomentum,
    Adam,
}

mod defaults {
    pub fn epochs() -> usize {
        200
    }
    pub fn rampup_length() -> usize {
        20
    }
    pub fn lambda_max() -> f64 {
        super::DEFAULT_LAMBDA_MAX
    }
    pub fn batch_size() -> usize {
        4
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_cap() -> f64 {
        super::DEFAULT_WEIGHT_CAP
    }
    pub fn seed_pair() -> (u64, u64) {
        (1, 2)
    }
    pub fn width_multiplier() -> f64 {
        0.25
    }
    pub fn aspp_rates() -> Vec<usize> {
        vec![2, 4, 6]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::rampup_length")]
    pub rampup_length: usize,
    #[serde(default = "defaults::lambda_max")]
    pub lambda_max: f64,
    #[serde(default)]
    pub ramp_variant: RampVariant,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerName,
    /// Momentum for SGD; ignored by Adam.
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub hausdorff: HausdorffParams,
    #[serde(default)]
    pub tversky: TverskyParams,
    /// Upper bound on class weights (lower bound is its reciprocal).
    #[serde(default = "defaults::weight_cap")]
    pub weight_cap: f64,
    /// Initialization seeds of the two networks; the first also drives batch order.
    #[serde(default = "defaults::seed_pair")]
    pub seed_pair: (u64, u64),
    #[serde(default = "defaults::width_multiplier")]
    pub width_multiplier: f64,
    #[serde(default = "defaults::aspp_rates")]
    pub aspp_rates: Vec<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            epochs: defaults::epochs(),
            rampup_length: defaults::rampup_length(),
            lambda_max: defaults::lambda_max(),
            ramp_variant: RampVariant::default(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            optimizer: OptimizerName::default(),
            momentum: defaults::momentum(),
            hausdorff: HausdorffParams::default(),
            tversky: TverskyParams::default(),
            weight_cap: defaults::weight_cap(),
            seed_pair: defaults::seed_pair(),
            width_multiplier: defaults::width_multiplier(),
            aspp_rates: defaults::aspp_rates(),
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch_size must be >= 1".into()));
        }
        if !(self.weight_cap >= 1.0) {
            return Err(Error::InvalidParameter(format!("weight_cap must be >= 1, got {}", self.weight_cap)));
        }
        self.schedule().validate()?;
        self.optimizer_kind().validate()?;
        self.hausdorff.validate()?;
        self.model_config(self.seed_pair.0).validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> RampUpSchedule {
        RampUpSchedule {
            rampup_length: self.rampup_length,
            total_epochs: self.epochs,
            lambda_max: self.lambda_max,
            variant: self.ramp_variant,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::SgdMomentum => {
                OptimizerKind::SgdMomentum { learning_rate: self.learning_rate, momentum: self.momentum }
            }
            OptimizerName::Adam => OptimizerKind::adam(self.learning_rate),
        }
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.regime.architecture(), self.width_multiplier, seed);
        cfg.aspp_rates = self.aspp_rates.clone();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize_and_validate() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"regime": "cps"}"#).unwrap();
        assert_eq!(cfg, TrainConfig::new(Regime::Cps));
        cfg.validate().unwrap();
        assert_eq!(cfg.optimizer_kind(), OptimizerKind::SgdMomentum { learning_rate: 0.01, momentum: 0.9 });
    }

    #[test]
    fn invalid_values_are_rejected() {
        let base = TrainConfig::new(Regime::Cps);
        assert!(TrainConfig { rampup_length: 300, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..base.clone() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"regime": "cps", "bogus": 1}"#).is_err());
    }
}
