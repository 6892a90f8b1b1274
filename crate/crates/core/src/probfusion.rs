//! Objectness prior, marginal class scores and Boosting Reweighting.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorScore {
    pub objectness: f64,
    pub iou_pred: f64,
    pub prior: f64,
}

impl PriorScore {
    pub fn new(objectness: f64, iou_pred: f64) -> Self {
        Self {
            objectness,
            iou_pred,
            prior: objectness_prior(objectness, iou_pred),
        }
    }
}

/// Geometric mean of objectness and predicted IoU.
pub fn objectness_prior(objectness: f64, iou_pred: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&objectness) && (0.0..=1.0).contains(&iou_pred));
    (objectness * iou_pred).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    pub prior: f64,
    /// Softmax over foreground classes followed by background.
    pub cls: Vec<f64>,
    pub final_scores: Vec<f64>,
}

impl FusedScore {
    pub fn new(prior: f64, cls: Vec<f64>) -> Self {
        Self {
            prior,
            final_scores: marginal_score(prior, &cls),
            cls,
        }
    }
}

/// `sqrt(prior * cls[c])` for every entry of `cls`.
pub fn marginal_score(prior: f64, cls: &[f64]) -> Vec<f64> {
    cls.iter().map(|&c| (prior * c).sqrt()).collect()
}

/// `(1 - prior)^gamma` for foreground samples and `prior^gamma` for
/// background ones.
pub fn boosting_weight(prior: f64, is_foreground: bool, gamma: f64) -> f64 {
    let p = prior.clamp(0.0, 1.0);
    if gamma == 0.0 {
        1.0
    } else if is_foreground {
        (1.0 - p).powf(gamma)
    } else {
        p.powf(gamma)
    }
}

pub fn boosting_weights(priors: &[f64], is_foreground: &[bool], gamma: f64) -> Vec<f64> {
    assert_eq!(priors.len(), is_foreground.len());
    priors
        .iter()
        .zip(is_foreground)
        .map(|(&p, &fg)| boosting_weight(p, fg, gamma))
        .collect()
}

/// Soft target for the IoU-prediction branch; 0 for unmatched samples.
pub fn iou_prediction_target(decoded_pred: &BBox, matched_gt: Option<&BBox>) -> f64 {
    matched_gt.map_or(0.0, |g| iou(decoded_pred, g))
}
