pub mod chipper;
pub mod error;
pub mod geo;
pub mod inference;
pub mod losses;
pub mod maskgen;
pub mod models;
pub mod nn;
pub mod synth;
pub mod trainer;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = models::SegmentationModel<f32>;
pub type Model64 = models::SegmentationModel<f64>;
pub type Logits32 = losses::PredictionLogits<f32>;
pub type Logits64 = losses::PredictionLogits<f64>;
pub type ProbabilityChip32 = inference::ProbabilityChip<f32>;
pub type ProbabilityChip64 = inference::ProbabilityChip<f64>;
pub type Mosaic32 = inference::ProbabilityMosaic<f32>;
pub type Mosaic64 = inference::ProbabilityMosaic<f64>;
pub type CpsOutcome32 = trainer::CpsOutcome<f32>;
pub type SupervisedOutcome32 = trainer::SupervisedOutcome<f32>;
