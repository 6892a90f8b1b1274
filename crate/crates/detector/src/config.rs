//! Detector architecture, domain-generalisation toggles and optimiser
//! settings. All three round-trip through serde and reject unknown keys.

use std::str::FromStr;

use aqua_core::losses::{RegressionKind, FIOU_ETA};
use serde::{Deserialize, Serialize};

use crate::error::{DetectorError, Result};

/// Backbone stages available to the pyramid; stage `s` has stride `2^s`.
pub const NUM_STAGES: usize = 4;

const MAX_DEPTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Output size of the domain classifier (number of source domains).
    pub num_domains: usize,
    /// Output channels of the four backbone stages.
    pub widths: Vec<usize>,
    /// Convolutions per stage; the first of each has stride 2.
    pub stage_depth: usize,
    pub backbone_groups: usize,
    pub fpn_channels: usize,
    /// Backbone stages (1-based) feeding the pyramid.
    pub levels: Vec<usize>,
    /// Anchor side is `anchor_scale * stride * {1, 2^(1/3), 2^(2/3)}`.
    pub anchor_scale: f64,
    pub head_depth: usize,
    pub head_groups: usize,
    /// Objectness prior used for the bias initialisation.
    pub prior_prob: f64,
    pub rpn_iou_threshold: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// `fiou` or a regression kind name (`smooth_l1`, `giou`, ...).
    pub rpn_box_loss: String,
    pub fiou_eta: f64,
    pub rcnn_box_loss: String,
    /// Second-stage delta normalisation.
    pub delta_std: [f64; 4],
    pub roi_size: usize,
    pub roi_samples: usize,
    pub rcnn_hidden: usize,
    pub rcnn_iou_threshold: f64,
    pub rois_per_image: usize,
    pub roi_positive_fraction: f64,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub proposal_nms: f64,
    pub test_nms: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub loss_weights: LossWeights,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_domains: 6,
            widths: vec![16, 32, 64, 128],
            stage_depth: 1,
            backbone_groups: 8,
            fpn_channels: 32,
            levels: vec![3, 4],
            anchor_scale: 2.0,
            head_depth: 4,
            head_groups: 32,
            prior_prob: 0.01,
            rpn_iou_threshold: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            rpn_box_loss: "fiou".into(),
            fiou_eta: FIOU_ETA,
            rcnn_box_loss: "smooth_l1".into(),
            delta_std: [0.1, 0.1, 0.2, 0.2],
            roi_size: 7,
            roi_samples: 2,
            rcnn_hidden: 128,
            rcnn_iou_threshold: 0.5,
            rois_per_image: 32,
            roi_positive_fraction: 0.25,
            train_proposals: 256,
            test_proposals: 100,
            proposal_nms: 0.7,
            test_nms: 0.5,
            score_threshold: 0.01,
            max_detections: 100,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub rpn_iou: f64,
    pub rcnn_cls: f64,
    pub rcnn_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rpn_cls: 1.0,
            rpn_reg: 1.0,
            rpn_iou: 1.0,
            rcnn_cls: 1.0,
            rcnn_reg: 1.0,
        }
    }
}

/// Box regression objective of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoxLoss {
    Fiou { eta: f64 },
    Plain(RegressionKind),
}

impl BoxLoss {
    pub fn parse(name: &str, eta: f64) -> Result<Self> {
        if name == "fiou" {
            return Ok(Self::Fiou { eta });
        }
        RegressionKind::from_str(name)
            .map(Self::Plain)
            .map_err(|e| DetectorError::Config(e.to_string()))
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if self.num_classes == 0 || self.num_domains == 0 {
            return bad("num_classes and num_domains must be positive".into());
        }
        if self.widths.len() != NUM_STAGES || self.widths.iter().any(|&w| w == 0) {
            return bad(format!("widths needs {NUM_STAGES} positive entries, got {:?}", self.widths));
        }
        if let Some(&w) = self.widths.iter().find(|&&w| w % self.backbone_groups.max(1) != 0) {
            return bad(format!("width {w} not divisible by backbone_groups {}", self.backbone_groups));
        }
        if self.backbone_groups == 0 || self.stage_depth == 0 {
            return bad("backbone_groups and stage_depth must be positive".into());
        }
        if self.stage_depth > MAX_DEPTH || self.head_depth > MAX_DEPTH {
            return bad(format!("stage_depth and head_depth are capped at {MAX_DEPTH}"));
        }
        if self.levels.is_empty()
            || self.levels.iter().any(|&l| l == 0 || l > NUM_STAGES)
            || self.levels.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!("levels must be increasing stages in 1..={NUM_STAGES}, got {:?}", self.levels));
        }
        if self.fpn_channels == 0 || self.head_groups == 0 || self.fpn_channels % self.head_groups != 0 {
            return bad(format!(
                "fpn_channels {} must be a positive multiple of head_groups {}",
                self.fpn_channels, self.head_groups
            ));
        }
        if !(self.anchor_scale > 0.0 && self.anchor_scale.is_finite()) {
            return bad(format!("anchor_scale {}", self.anchor_scale));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad(format!("prior_prob {} outside (0, 1)", self.prior_prob));
        }
        for (name, v) in [
            ("rpn_iou_threshold", self.rpn_iou_threshold),
            ("rcnn_iou_threshold", self.rcnn_iou_threshold),
            ("proposal_nms", self.proposal_nms),
            ("test_nms", self.test_nms),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} {v} outside (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            return bad(format!("focal alpha {} / gamma {}", self.focal_alpha, self.focal_gamma));
        }
        if !(self.fiou_eta >= 0.0) {
            return bad(format!("fiou_eta {}", self.fiou_eta));
        }
        BoxLoss::parse(&self.rpn_box_loss, self.fiou_eta)?;
        if matches!(BoxLoss::parse(&self.rcnn_box_loss, self.fiou_eta)?, BoxLoss::Fiou { .. }) {
            return bad("fiou is a first-stage loss; pick a regression kind for rcnn_box_loss".into());
        }
        if self.delta_std.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("delta_std {:?}", self.delta_std));
        }
        if self.roi_size == 0 || self.roi_samples == 0 || self.rcnn_hidden == 0 || self.rois_per_image == 0 {
            return bad("roi_size, roi_samples, rcnn_hidden and rois_per_image must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.roi_positive_fraction) {
            return bad(format!("roi_positive_fraction {}", self.roi_positive_fraction));
        }
        if self.train_proposals == 0 || self.test_proposals == 0 || self.train_proposals > 256 || self.test_proposals > 256 {
            return bad("proposal counts must lie in 1..=256".into());
        }
        if !(0.0..1.0).contains(&self.score_threshold) || self.max_detections == 0 {
            return bad("score_threshold must lie in [0, 1) and max_detections be positive".into());
        }
        let w = &self.loss_weights;
        if [w.rpn_cls, w.rpn_reg, w.rpn_iou, w.rcnn_cls, w.rcnn_reg]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn rpn_loss(&self) -> BoxLoss {
        BoxLoss::parse(&self.rpn_box_loss, self.fiou_eta).expect("validated")
    }

    pub fn rcnn_loss(&self) -> RegressionKind {
        match BoxLoss::parse(&self.rcnn_box_loss, self.fiou_eta).expect("validated") {
            BoxLoss::Plain(k) => k,
            BoxLoss::Fiou { .. } => unreachable!("rejected by validate"),
        }
    }

    /// Stride of pyramid level `stage`.
    pub fn stride(stage: usize) -> usize {
        1 << stage
    }

    /// Input sides must be multiples of the coarsest stride.
    pub fn input_multiple(&self) -> usize {
        1 << NUM_STAGES
    }
}

/// Domain-generalisation toggles and their parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgConfig {
    /// Boosting Reweighting focus; 0 gives uniform weights.
    pub br_gamma: f64,
    pub dmx: bool,
    pub dmx_alpha: f64,
    /// Backbone stages (1-based) whose main-stream output is mixed.
    pub dmx_layers: Vec<usize>,
    pub ssmc: bool,
    /// `k = max(1, round(H * W * fraction))` at the last stage.
    pub ssmc_k_fraction: f64,
    pub ssmc_delta: f64,
    pub ssmc_weight: f64,
    pub grl: bool,
    /// Weight of the domain-classifier loss.
    pub grl_lambda: f64,
    /// Gradient reversal coefficient.
    pub grl_scale: f64,
    pub irm: bool,
    pub irm_lambda: f64,
}

impl Default for DgConfig {
    fn default() -> Self {
        Self {
            br_gamma: 1.0,
            dmx: false,
            dmx_alpha: 2.0,
            dmx_layers: vec![2, 3, 4],
            ssmc: false,
            ssmc_k_fraction: 1.0 / 16.0,
            ssmc_delta: aqua_core::dginvariance::SSMC_DELTA,
            ssmc_weight: 1.0,
            grl: false,
            grl_lambda: 0.1,
            grl_scale: 1.0,
            irm: false,
            irm_lambda: 0.1,
        }
    }
}

impl DgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if !(self.br_gamma >= 0.0 && self.br_gamma.is_finite()) {
            return bad(format!("br_gamma {}", self.br_gamma));
        }
        if !(self.dmx_alpha > 0.0 && self.dmx_alpha.is_finite()) {
            return bad(format!("dmx_alpha {}", self.dmx_alpha));
        }
        if self.dmx_layers.iter().any(|&l| l == 0 || l > NUM_STAGES) {
            return bad(format!("dmx_layers {:?} outside 1..={NUM_STAGES}", self.dmx_layers));
        }
        if !(self.ssmc_k_fraction > 0.0 && self.ssmc_k_fraction <= 1.0) {
            return bad(format!("ssmc_k_fraction {}", self.ssmc_k_fraction));
        }
        for (name, v) in [
            ("ssmc_delta", self.ssmc_delta),
            ("ssmc_weight", self.ssmc_weight),
            ("grl_lambda", self.grl_lambda),
            ("grl_scale", self.grl_scale),
            ("irm_lambda", self.irm_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v}"));
            }
        }
        Ok(())
    }

    /// No branch stream is needed.
    pub fn is_single_stream(&self) -> bool {
        !self.dmx && !self.ssmc
    }
}

/// Experimental condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Plain two-stage training on the pooled source domains.
    #[serde(rename = "deepall")]
    DeepAll,
    /// Prior fusion with Boosting Reweighting.
    Boosting,
    /// Domain mixup with the SSMC loss on paired images.
    Dmc,
    /// Gradient-reversed domain classifier plus the IRM penalty.
    DgAdv,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [Self::DeepAll, Self::Boosting, Self::Dmc, Self::DgAdv];

    pub fn name(&self) -> &'static str {
        match self {
            Self::DeepAll => "deepall",
            Self::Boosting => "boosting",
            Self::Dmc => "dmc",
            Self::DgAdv => "dg-adv",
        }
    }

    /// Toggles forced by the mode; parameters come from `dg`.
    pub fn resolve(&self, dg: &DgConfig) -> DgConfig {
        let mut out = dg.clone();
        out.dmx = false;
        out.ssmc = false;
        out.grl = false;
        out.irm = false;
        match self {
            Self::DeepAll => out.br_gamma = 0.0,
            Self::Boosting => {}
            Self::Dmc => {
                out.br_gamma = 0.0;
                out.dmx = true;
                out.ssmc = true;
            }
            Self::DgAdv => {
                out.br_gamma = 0.0;
                out.grl = true;
                out.irm = true;
            }
        }
        out
    }

    pub fn needs_pairs(&self) -> bool {
        matches!(self, Self::Dmc)
    }
}

impl FromStr for TrainMode {
    type Err = DetectorError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DetectorError::Config(format!("unknown mode `{s}` (expected deepall, boosting, dmc or dg-adv)")))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub warmup_steps: u64,
    /// Fractions of `steps` after which the rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub seed: u64,
    /// Loss above which training aborts.
    pub divergence_threshold: f64,
    /// Horizontal flips during training.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            warmup_steps: 100,
            decay_at: vec![0.75, 0.9],
            decay_factor: 0.1,
            seed: 0,
            divergence_threshold: 1e4,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight_decay and clip_norm must be non-negative".into());
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_at {:?} / decay_factor {}", self.decay_at, self.decay_factor));
        }
        if !(self.divergence_threshold > 0.0) {
            return bad(format!("divergence_threshold {}", self.divergence_threshold));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based): linear warmup, then step decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        let mut lr = self.lr;
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        for &f in &self.decay_at {
            if step as f64 >= f * self.steps as f64 {
                lr *= self.decay_factor;
            }
        }
        lr
    }

    pub fn sgd(&self) -> aqua_autodiff::SgdConfig {
        aqua_autodiff::SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}
