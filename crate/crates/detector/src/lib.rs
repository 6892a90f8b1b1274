//! A small two-stage object detector for underwater-style imagery.
//!
//! The first stage predicts objectness, an IoU estimate and box deltas for
//! every anchor of a feature pyramid. Their product forms a prior that is
//! fused with second-stage class probabilities. Training supports boosting
//! reweighting of hard examples, paired-domain feature mixing with a
//! consistency loss, and an adversarial domain classifier with an
//! invariance penalty.

pub mod checkpoint;
pub mod config;
mod detector;
pub mod error;
pub mod instrument;
pub mod model;
mod objective;
mod train;

pub use config::{BoxLoss, DetectorConfig, DgConfig, LossWeights, TrainConfig, TrainMode};
pub use detector::{Detector, FirstStageImage, FirstStageOutput, Proposal, RoiOutput};
pub use error::{DetectorError, Result};
pub use model::{AnchorLayout, LevelLayout};
pub use objective::COMPONENTS;
pub use train::{hflip, PairedBatch, StepReport, TrainImage, TrainState, Trainer};

/// Independent seed for item `index` of a stream (splitmix64 finaliser).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
