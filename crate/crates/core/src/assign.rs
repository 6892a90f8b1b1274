//! Anchor/proposal labelling, proposal selection and RoI sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxgeom::{iou, nms_indices, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    pub matched_gt: Vec<Option<usize>>,
    pub matched_iou: Vec<f64>,
    /// Positives that only exist because of the best-anchor rule; these are
    /// the only positives allowed below the threshold.
    pub forced: Vec<bool>,
}

impl AssignmentResult {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.labels[i] == AnchorLabel::Positive
    }
}

/// Label each anchor by its best-IoU ground truth (ties: lowest GT index),
/// then force every GT's best anchor (ties: lowest anchor index) positive.
/// When two GTs claim the same anchor the lower GT index keeps it.
pub fn assign_by_iou_threshold(anchors: &[BBox], gts: &[BBox], threshold: f64) -> Result<AssignmentResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::OutOfRange {
            name: "threshold",
            value: threshold,
            expected: "(0, 1)",
        });
    }
    let n = anchors.len();
    let mut out = AssignmentResult {
        labels: vec![AnchorLabel::Negative; n],
        matched_gt: vec![None; n],
        matched_iou: vec![0.0; n],
        forced: vec![false; n],
    };
    if gts.is_empty() {
        return Ok(out);
    }
    // best anchor per GT: (iou, anchor index)
    let mut best_anchor = vec![(0.0f64, usize::MAX); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best = (0.0f64, 0usize);
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.0 {
                best = (v, j);
            }
            if v > best_anchor[j].0 {
                best_anchor[j] = (v, i);
            }
        }
        out.matched_iou[i] = best.0;
        if best.0 >= threshold {
            out.labels[i] = AnchorLabel::Positive;
            out.matched_gt[i] = Some(best.1);
        }
    }
    let mut claimed = vec![false; n];
    for (j, &(v, i)) in best_anchor.iter().enumerate() {
        if i == usize::MAX || claimed[i] {
            continue;
        }
        claimed[i] = true;
        if out.matched_gt[i] != Some(j) {
            out.forced[i] = v < threshold || out.labels[i] == AnchorLabel::Negative;
            out.labels[i] = AnchorLabel::Positive;
            out.matched_gt[i] = Some(j);
            out.matched_iou[i] = v;
        }
    }
    Ok(out)
}

/// NMS at `nms_threshold`, then keep the first `max_keep` survivors. Returns
/// indices into `scored`, highest score first.
pub fn select_top_proposals(scored: &[(BBox, f64)], nms_threshold: f64, max_keep: usize) -> Vec<usize> {
    let boxes: Vec<BBox> = scored.iter().map(|s| s.0).collect();
    let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let mut keep = nms_indices(&boxes, &scores, nms_threshold);
    keep.truncate(max_keep);
    keep
}

/// Draw at most `positive_fraction * batch_size` positives, then fill the
/// batch with negatives. Positives come first in the returned list.
pub fn sample_rois(is_positive: &[bool], batch_size: usize, positive_fraction: f64, rng_seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::OutOfRange {
            name: "positive_fraction",
            value: positive_fraction,
            expected: "[0, 1]",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pos: Vec<usize> = (0..is_positive.len()).filter(|&i| is_positive[i]).collect();
    let mut neg: Vec<usize> = (0..is_positive.len()).filter(|&i| !is_positive[i]).collect();
    let want_pos = ((positive_fraction * batch_size as f64).floor() as usize).min(pos.len());
    pos.shuffle(&mut rng);
    pos.truncate(want_pos);
    let want_neg = (batch_size - want_pos).min(neg.len());
    neg.shuffle(&mut rng);
    neg.truncate(want_neg);
    pos.extend(neg);
    Ok(pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identical_anchor_is_positive() {
        let g = b(0., 0., 4., 4.);
        let r = assign_by_iou_threshold(&[g, b(10., 10., 12., 12.)], &[g], 0.5).unwrap();
        assert_eq!(r.labels, vec![AnchorLabel::Positive, AnchorLabel::Negative]);
        assert_eq!(r.matched_iou[0], 1.0);
        assert_eq!(r.matched_gt[0], Some(0));
        assert!(!r.forced[0]);
    }

    #[test]
    fn empty_gts_all_negative() {
        let r = assign_by_iou_threshold(&[b(0., 0., 1., 1.)], &[], 0.5).unwrap();
        assert_eq!(r.num_positive(), 0);
        assert!(assign_by_iou_threshold(&[], &[], 1.0).is_err());
    }

    #[test]
    fn weak_gt_gets_forced_anchor() {
        let anchors = [b(0., 0., 4., 4.), b(0., 0., 8., 8.)];
        let gt = [b(0., 0., 3., 3.)];
        let r = assign_by_iou_threshold(&anchors, &gt, 0.7).unwrap();
        assert_eq!(r.labels[0], AnchorLabel::Positive);
        assert!(r.forced[0]);
        assert_eq!(r.labels[1], AnchorLabel::Negative);
    }

    #[test]
    fn sampling_counts() {
        let mut flags = vec![true; 10];
        flags.extend(vec![false; 100]);
        let s = sample_rois(&flags, 8, 0.25, 7).unwrap();
        assert_eq!(s.iter().filter(|&&i| flags[i]).count(), 2);
        assert_eq!(s.len(), 8);
        assert_eq!(s, sample_rois(&flags, 8, 0.25, 7).unwrap());

        let mut flags = vec![true];
        flags.extend(vec![false; 100]);
        let s = sample_rois(&flags, 8, 0.25, 7).unwrap();
        assert_eq!(s.iter().filter(|&&i| flags[i]).count(), 1);
        assert_eq!(s.len(), 8);
        assert!(sample_rois(&[], 8, 0.25, 1).unwrap().is_empty());
    }

    #[test]
    fn proposals_truncate() {
        let same: Vec<(BBox, f64)> = (0..300).map(|i| (b(0., 0., 5., 5.), i as f64)).collect();
        assert_eq!(select_top_proposals(&same, 0.7, 256), vec![299]);
        let disjoint: Vec<(BBox, f64)> = (0..10).map(|i| (b(10. * i as f64, 0., 10. * i as f64 + 5., 5.), i as f64)).collect();
        let keep = select_top_proposals(&disjoint, 0.7, 256);
        assert_eq!(keep, (0..10).rev().collect::<Vec<_>>());
    }
}
