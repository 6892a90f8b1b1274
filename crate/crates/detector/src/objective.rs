//! Training targets and the composite detection objective.

use aqua_autodiff::{concat, sigmoid, Real, SampleLoss, Tensor, Var};
use aqua_core::assign::{assign_by_iou_threshold, sample_rois};
use aqua_core::boxgeom::{decode_box, encode_box, iou, EncodedDelta};
use aqua_core::dginvariance::{domain_adversarial_loss_var, ssmc_loss_var};
use aqua_core::losses::{bce_with_logit, decode_generic, fiou_deltas, focal_with_logit};
use aqua_core::probfusion::{boosting_weights, PriorScore};
use aqua_core::BBox;

use crate::config::{BoxLoss, DgConfig, DetectorConfig, NUM_STAGES};
use crate::detector::{propose, FirstStageImage, Proposal};
use crate::error::{DetectorError, Result};
use crate::instrument;
use crate::model::{self, AnchorLayout, BackboneOut, Bound, HeadOut};
use crate::TrainImage;

/// Below this decoded IoU the FIoU factor `IoU^eta` is treated as zero,
/// which is its limit and keeps the derivative finite.
const FIOU_MIN_IOU: f64 = 1e-4;

/// Loss component names in reporting order.
pub const COMPONENTS: [&str; 8] = ["rpn_cls", "rpn_reg", "rpn_iou", "rcnn_cls", "rcnn_reg", "ssmc", "domain", "irm"];

struct FocalLogit {
    labels: Vec<f64>,
    alpha: f64,
    gamma: f64,
}

impl SampleLoss<1> for FocalLogit {
    fn eval<R: Real>(&self, row: usize, x: [R; 1]) -> R {
        focal_with_logit(x[0], self.labels[row], self.alpha, self.gamma)
    }
}

struct SoftBce {
    targets: Vec<f64>,
}

impl SampleLoss<1> for SoftBce {
    fn eval<R: Real>(&self, row: usize, x: [R; 1]) -> R {
        bce_with_logit(x[0], self.targets[row])
    }
}

#[derive(Clone, Copy)]
struct BoxTarget {
    reference: BBox,
    gt: BBox,
    /// Target deltas, already divided by `scale`.
    delta: [f64; 4],
}

/// Regression on `[rows, 4]` deltas; `scale` multiplies the raw outputs
/// before decoding.
struct BoxRegression {
    loss: BoxLoss,
    scale: [f64; 4],
    rows: Vec<BoxTarget>,
}

impl SampleLoss<4> for BoxRegression {
    fn eval<R: Real>(&self, row: usize, x: [R; 4]) -> R {
        let t = &self.rows[row];
        match self.loss {
            BoxLoss::Fiou { eta } => {
                let plain = decode_box(&EncodedDelta::from_array(x.map(R::value)), &t.reference);
                if eta > 0.0 && iou(&plain, &t.gt) < FIOU_MIN_IOU {
                    return R::cst(0.0);
                }
                fiou_deltas(x, t.delta, &t.gt, &t.reference, eta)
            }
            BoxLoss::Plain(kind) if kind.takes_deltas() => kind.eval(x, t.delta),
            BoxLoss::Plain(kind) => {
                let scaled: [R; 4] = std::array::from_fn(|k| x[k] * self.scale[k]);
                kind.eval(decode_generic(scaled, &t.reference), t.gt.to_array())
            }
        }
    }
}

/// Assigned first-stage targets of a batch.
struct AnchorTargets {
    labels: Vec<f64>,
    positives: Vec<usize>,
    boxes: Vec<BoxTarget>,
}

fn anchor_targets(config: &DetectorConfig, layout: &AnchorLayout, batch: &[TrainImage]) -> Result<AnchorTargets> {
    let a = layout.len();
    let mut out = AnchorTargets {
        labels: vec![0.0; batch.len() * a],
        positives: Vec::new(),
        boxes: Vec::new(),
    };
    for (n, img) in batch.iter().enumerate() {
        let r = assign_by_iou_threshold(&layout.anchors, &img.boxes, config.rpn_iou_threshold)?;
        for i in 0..a {
            if let (true, Some(g)) = (r.is_positive(i), r.matched_gt[i]) {
                let anchor = layout.anchors[i];
                let gt = img.boxes[g];
                out.labels[n * a + i] = 1.0;
                out.positives.push(n * a + i);
                out.boxes.push(BoxTarget {
                    reference: anchor,
                    gt,
                    delta: encode_box(&gt, &anchor)?.to_array(),
                });
            }
        }
    }
    Ok(out)
}

/// Rows `indices` of `[n, a]` coordinate tensors, as `[len, 4]`.
fn gather_rows<'t>(coords: &[Var<'t>; 4], indices: &[usize]) -> Var<'t> {
    let cols: Vec<Var<'t>> = coords
        .iter()
        .map(|c| {
            let total: usize = c.shape().iter().product();
            c.reshape(&[total, 1]).index_select(indices)
        })
        .collect();
    concat(&cols, 1)
}

fn first_stage_values(head: &HeadOut<'_>, batch: usize, a: usize) -> Vec<FirstStageImage> {
    let (obj, iou) = (head.objectness.value(), head.iou.value());
    let d: [_; 4] = std::array::from_fn(|k| head.deltas[k].value());
    (0..batch)
        .map(|n| {
            let range = n * a..(n + 1) * a;
            let objectness: Vec<f64> = obj.data()[range.clone()].iter().map(|&v| sigmoid(v)).collect();
            let iou_pred: Vec<f64> = iou.data()[range.clone()].iter().map(|&v| sigmoid(v)).collect();
            FirstStageImage {
                deltas: range.clone().map(|i| std::array::from_fn(|k| d[k].data()[i])).collect(),
                prior: objectness
                    .iter()
                    .zip(&iou_pred)
                    .map(|(&o, &q)| PriorScore::new(o, q))
                    .collect(),
                objectness,
                iou_pred,
            }
        })
        .collect()
}

/// Weighted loss components of one training forward pass.
pub(crate) struct Objective<'t> {
    pub components: Vec<(&'static str, Var<'t>)>,
}

pub(crate) struct ForwardInputs<'a, 'b, 't> {
    pub config: &'a DetectorConfig,
    pub dg: &'a DgConfig,
    pub bound: &'b Bound<'a, 't>,
    pub backbone: &'b BackboneOut<'t>,
    pub batch: &'b [TrainImage],
    pub layout: &'b AnchorLayout,
    pub seed: u64,
}

pub(crate) fn detection_objective<'t>(inp: ForwardInputs<'_, '_, 't>) -> Result<Objective<'t>> {
    let ForwardInputs {
        config,
        dg,
        bound: b,
        backbone,
        batch,
        layout,
        seed,
    } = inp;
    let tape = backbone.stages[0].tape();
    let zero = || tape.constant(Tensor::scalar(0.0));
    let w = &config.loss_weights;
    let a = layout.len();
    let n = batch.len();

    let levels = model::pyramid(config, b, &backbone.stages);
    let head = model::first_stage_head(config, b, &levels);

    // first stage
    let targets = anchor_targets(config, layout, batch)?;
    let num_pos = targets.positives.len();
    let norm = 1.0 / num_pos.max(1) as f64;
    let rpn_cls = head.objectness.reshape(&[n * a, 1]).sample_loss(FocalLogit {
        labels: targets.labels.clone(),
        alpha: config.focal_alpha,
        gamma: config.focal_gamma,
    }) * (norm * w.rpn_cls);

    let (rpn_reg, rpn_iou) = if num_pos == 0 {
        (zero(), zero())
    } else {
        let rows = gather_rows(&head.deltas, &targets.positives);
        let values = rows.value();
        let iou_targets: Vec<f64> = targets
            .boxes
            .iter()
            .enumerate()
            .map(|(r, t)| {
                let d: [f64; 4] = std::array::from_fn(|k| values.data()[r * 4 + k]);
                iou(&decode_box(&EncodedDelta::from_array(d), &t.reference), &t.gt)
            })
            .collect();
        let reg = rows.sample_loss(BoxRegression {
            loss: config.rpn_loss(),
            scale: [1.0; 4],
            rows: targets.boxes.clone(),
        }) * (norm * w.rpn_reg);
        let iou_rows = head.iou.reshape(&[n * a, 1]).index_select(&targets.positives);
        let iou_loss = iou_rows.sample_loss(SoftBce { targets: iou_targets }) * (norm * w.rpn_iou);
        (reg, iou_loss)
    };

    // proposals from detached first-stage outputs, plus the ground truth
    let first = first_stage_values(&head, n, a);
    let mut rois: Vec<(usize, [f64; 4])> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut priors: Vec<f64> = Vec::new();
    let mut fg_flags: Vec<bool> = Vec::new();
    let mut reg_rows: Vec<usize> = Vec::new();
    let mut reg_targets: Vec<BoxTarget> = Vec::new();
    let mut roi_domain: Vec<usize> = Vec::new();
    let std = config.delta_std;
    for (i, img) in batch.iter().enumerate() {
        let mut props = propose(layout, &first[i], config.proposal_nms, config.train_proposals);
        props.extend(img.boxes.iter().map(|&bbox| Proposal { bbox, prior: 1.0 }));
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let assigned = assign_by_iou_threshold(&boxes, &img.boxes, config.rcnn_iou_threshold)?;
        let is_pos: Vec<bool> = (0..boxes.len()).map(|k| assigned.is_positive(k)).collect();
        let picked = sample_rois(
            &is_pos,
            config.rois_per_image,
            config.roi_positive_fraction,
            crate::derive_seed(seed, i as u64),
        )?;
        for k in picked {
            let p = props[k];
            rois.push((i, p.bbox.to_array()));
            priors.push(p.prior);
            fg_flags.push(is_pos[k]);
            roi_domain.push(img.domain);
            match assigned.matched_gt[k].filter(|_| is_pos[k]) {
                Some(g) => {
                    let gt = img.boxes[g];
                    labels.push(img.classes[g]);
                    let raw = encode_box(&gt, &p.bbox)?.to_array();
                    reg_rows.push(rois.len() - 1);
                    reg_targets.push(BoxTarget {
                        reference: p.bbox,
                        gt,
                        delta: std::array::from_fn(|j| raw[j] / std[j]),
                    });
                }
                None => labels.push(config.num_classes),
            }
        }
    }

    let (logits, deltas) = model::second_stage(config, b, levels[0], &rois);
    let raw_weights = boosting_weights(&priors, &fg_flags, dg.br_gamma);
    instrument::bump(|c| c.boosting_weights += 1);
    let r_total = rois.len().max(1) as f64;
    let ce_weights: Vec<f64> = raw_weights.iter().map(|v| v / r_total).collect();
    let rcnn_cls = logits.softmax_cross_entropy(&labels, &ce_weights) * w.rcnn_cls;
    let rcnn_reg = if reg_rows.is_empty() {
        zero()
    } else {
        deltas.index_select(&reg_rows).sample_loss(BoxRegression {
            loss: BoxLoss::Plain(config.rcnn_loss()),
            scale: std,
            rows: reg_targets,
        }) * (w.rcnn_reg / reg_rows.len() as f64)
    };

    let mut components = vec![
        ("rpn_cls", rpn_cls),
        ("rpn_reg", rpn_reg),
        ("rpn_iou", rpn_iou),
        ("rcnn_cls", rcnn_cls),
        ("rcnn_reg", rcnn_reg),
    ];

    if dg.ssmc {
        if let Some(branch) = backbone.branch_last {
            instrument::bump(|c| c.ssmc += 1);
            let s = branch.shape();
            let k = ((s[2] * s[3]) as f64 * dg.ssmc_k_fraction).round().max(1.0) as usize;
            components.push(("ssmc", ssmc_loss_var(backbone.last_unmixed, branch, k, dg.ssmc_delta) * dg.ssmc_weight));
        }
    }
    if dg.grl {
        instrument::bump(|c| c.gradient_reversal += 1);
        let domains: Vec<usize> = batch.iter().map(|t| t.domain).collect();
        if let Some(&d) = domains.iter().find(|&&d| d >= config.num_domains) {
            return Err(DetectorError::Batch(format!("domain {d} outside the {} classifier outputs", config.num_domains)));
        }
        let features = backbone.stages[NUM_STAGES - 1].global_avg_pool();
        let loss = domain_adversarial_loss_var(features, &model::domain_classifier(b), &domains, dg.grl_scale)?;
        components.push(("domain", loss * dg.grl_lambda));
    }
    if dg.irm {
        instrument::bump(|c| c.irm += 1);
        let mut envs: Vec<usize> = roi_domain.clone();
        envs.sort_unstable();
        envs.dedup();
        let mut penalty: Option<Var<'t>> = None;
        for e in envs {
            let count = roi_domain.iter().filter(|&&d| d == e).count() as f64;
            let weights: Vec<f64> = raw_weights
                .iter()
                .zip(&roi_domain)
                .map(|(&wv, &d)| if d == e { wv / count } else { 0.0 })
                .collect();
            let grad_r = logits.softmax_ce_scale_derivative(&labels, &weights).square();
            penalty = Some(match penalty {
                Some(p) => p + grad_r,
                None => grad_r,
            });
        }
        components.push(("irm", penalty.unwrap_or_else(zero) * dg.irm_lambda));
    }
    Ok(Objective { components })
}
