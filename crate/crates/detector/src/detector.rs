//! The detector and its inference path.

use std::collections::HashMap;

use aqua_autodiff::{sigmoid, softmax, ParamStore, Tape};
use aqua_core::assign::select_top_proposals;
use aqua_core::boxgeom::{decode_box, nms, EncodedDelta};
use aqua_core::evalkit::RawDetections;
use aqua_core::probfusion::{FusedScore, PriorScore};
use aqua_core::{BBox, Image};

use crate::config::DetectorConfig;
use crate::error::{DetectorError, Result};
use crate::model::{self, AnchorLayout, Bound};

/// A second-stage input box with its first-stage prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub prior: f64,
}

/// First-stage outputs of one image, in [`AnchorLayout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstStageImage {
    pub objectness: Vec<f64>,
    pub iou_pred: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
    pub prior: Vec<PriorScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstStageOutput {
    pub layout: AnchorLayout,
    pub images: Vec<FirstStageImage>,
}

/// Second-stage output of one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiOutput {
    pub proposal: Proposal,
    /// Class probabilities (background last), prior and fused scores.
    pub fused: FusedScore,
    /// Normalised class-agnostic deltas.
    pub deltas: [f64; 4],
    /// Refined box, clipped to the image.
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: ParamStore,
    index: HashMap<String, usize>,
}

impl Detector {
    /// Freshly initialised weights.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = model::init_params(&config, seed);
        Ok(Self::assemble(config, params))
    }

    /// Wrap existing weights; names and shapes must match the architecture.
    pub fn from_params(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = model::init_params(&config, 0);
        if reference.names() != params.names() {
            return Err(DetectorError::Checkpoint("parameter names do not match the configured architecture".into()));
        }
        for ((name, a), b) in reference.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(DetectorError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            if !b.all_finite() {
                return Err(DetectorError::Checkpoint(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: DetectorConfig, params: ParamStore) -> Self {
        let index = params.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { config, params, index }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn bind<'a, 't>(&'a self, tape: &'t Tape, trainable: bool) -> Bound<'a, 't> {
        Bound::new(tape, &self.params, &self.index, trainable)
    }

    pub fn layout(&self, width: usize, height: usize) -> AnchorLayout {
        AnchorLayout::new(&self.config, width, height)
    }

    pub fn forward_first_stage(&self, images: &[Image]) -> Result<FirstStageOutput> {
        let tape = Tape::new();
        let (out, _) = self.eval_first_stage(&tape, images)?;
        Ok(out)
    }

    /// Runs backbone, pyramid and first stage on constants. Returns the
    /// finest pyramid level for the second stage.
    fn eval_first_stage<'t>(&self, tape: &'t Tape, images: &[Image]) -> Result<(FirstStageOutput, aqua_autodiff::Var<'t>)> {
        let x = model::image_batch(images, self.config.input_multiple())?;
        let (h, w) = (x.dim(2), x.dim(3));
        let b = self.bind(tape, false);
        let input = tape.constant(x);
        let bb = model::backbone(&self.config, &b, input, None, &[None; crate::config::NUM_STAGES]);
        let levels = model::pyramid(&self.config, &b, &bb.stages);
        let head = model::first_stage_head(&self.config, &b, &levels);
        let layout = self.layout(w, h);
        let a = layout.len();
        let (obj, iou) = (head.objectness.value(), head.iou.value());
        let d: [_; 4] = std::array::from_fn(|k| head.deltas[k].value());
        let mut out = Vec::with_capacity(images.len());
        for n in 0..images.len() {
            let range = n * a..(n + 1) * a;
            let objectness: Vec<f64> = obj.data()[range.clone()].iter().map(|&v| sigmoid(v)).collect();
            let iou_pred: Vec<f64> = iou.data()[range.clone()].iter().map(|&v| sigmoid(v)).collect();
            let deltas = range.clone().map(|i| std::array::from_fn(|k| d[k].data()[i])).collect();
            let prior = objectness.iter().zip(&iou_pred).map(|(&o, &q)| PriorScore::new(o, q)).collect();
            for v in objectness.iter().chain(&iou_pred) {
                if !v.is_finite() {
                    return Err(DetectorError::NonFinite {
                        step: 0,
                        component: "first-stage activation".into(),
                    });
                }
            }
            out.push(FirstStageImage {
                objectness,
                iou_pred,
                deltas,
                prior,
            });
        }
        Ok((FirstStageOutput { layout, images: out }, levels[0]))
    }

    /// Class probabilities and refined boxes for given proposals.
    pub fn forward_second_stage(&self, images: &[Image], proposals: &[Vec<Proposal>]) -> Result<Vec<Vec<RoiOutput>>> {
        if proposals.len() != images.len() {
            return Err(DetectorError::Batch(format!("{} proposal lists for {} images", proposals.len(), images.len())));
        }
        let tape = Tape::new();
        let (first, finest) = self.eval_first_stage(&tape, images)?;
        let b = self.bind(&tape, false);
        Ok(self.eval_second_stage(&b, finest, &first.layout, proposals))
    }

    fn eval_second_stage<'t>(
        &self,
        b: &Bound<'_, 't>,
        finest: aqua_autodiff::Var<'t>,
        layout: &AnchorLayout,
        proposals: &[Vec<Proposal>],
    ) -> Vec<Vec<RoiOutput>> {
        let rois: Vec<(usize, [f64; 4])> = proposals
            .iter()
            .enumerate()
            .flat_map(|(n, ps)| ps.iter().map(move |p| (n, p.bbox.to_array())))
            .collect();
        let mut out: Vec<Vec<RoiOutput>> = proposals.iter().map(|p| Vec::with_capacity(p.len())).collect();
        if rois.is_empty() {
            return out;
        }
        let (logits, deltas) = model::second_stage(&self.config, b, finest, &rois);
        let (logits, deltas) = (logits.value(), deltas.value());
        let k = self.config.num_classes + 1;
        let std = self.config.delta_std;
        let mut r = 0;
        for (n, ps) in proposals.iter().enumerate() {
            for p in ps {
                let probs = softmax(&logits.data()[r * k..(r + 1) * k]);
                let t: [f64; 4] = std::array::from_fn(|j| deltas.data()[r * 4 + j]);
                let scaled = EncodedDelta::from_array(std::array::from_fn(|j| t[j] * std[j]));
                let bbox = decode_box(&scaled, &p.bbox).clip(layout.image_width as f64, layout.image_height as f64);
                out[n].push(RoiOutput {
                    proposal: *p,
                    fused: FusedScore::new(p.prior, probs),
                    deltas: t,
                    bbox,
                });
                r += 1;
            }
        }
        out
    }

    pub fn detect(&self, image: &Image) -> Result<RawDetections> {
        Ok(self.detect_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Final `(box, class, score)` detections per image: prior-fused scores,
    /// per-class NMS, highest scores first.
    pub fn detect_batch(&self, images: &[Image]) -> Result<Vec<RawDetections>> {
        let tape = Tape::new();
        let (first, finest) = self.eval_first_stage(&tape, images)?;
        let proposals: Vec<Vec<Proposal>> = first
            .images
            .iter()
            .map(|f| propose(&first.layout, f, self.config.proposal_nms, self.config.test_proposals))
            .collect();
        let b = self.bind(&tape, false);
        let rois = self.eval_second_stage(&b, finest, &first.layout, &proposals);
        Ok(rois.iter().map(|r| self.postprocess(r)).collect())
    }

    fn postprocess(&self, rois: &[RoiOutput]) -> RawDetections {
        let c = self.config.num_classes;
        let mut dets = Vec::new();
        for class in 0..c {
            let cand: Vec<(BBox, f64)> = rois
                .iter()
                .filter(|r| r.bbox.width() > 0.0 && r.bbox.height() > 0.0)
                .map(|r| (r.bbox, r.fused.final_scores[class]))
                .filter(|(_, s)| *s > self.config.score_threshold)
                .collect();
            dets.extend(nms(&cand, self.config.test_nms).into_iter().map(|(b, s)| (b, class, s)));
        }
        dets.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
        dets.truncate(self.config.max_detections);
        dets
    }
}

/// Smallest proposal side kept, in pixels.
const MIN_PROPOSAL_SIDE: f64 = 1.0;

/// Decode every anchor, drop slivers, then NMS and keep the best `max_keep`
/// by prior.
pub(crate) fn propose(layout: &AnchorLayout, first: &FirstStageImage, nms_threshold: f64, max_keep: usize) -> Vec<Proposal> {
    let (w, h) = (layout.image_width as f64, layout.image_height as f64);
    let scored: Vec<(BBox, f64)> = layout
        .anchors
        .iter()
        .zip(&first.deltas)
        .zip(&first.prior)
        .map(|((a, d), p)| (decode_box(&EncodedDelta::from_array(*d), a).clip(w, h), p.prior))
        .filter(|(b, _)| b.width() >= MIN_PROPOSAL_SIDE && b.height() >= MIN_PROPOSAL_SIDE)
        .collect();
    select_top_proposals(&scored, nms_threshold, max_keep)
        .into_iter()
        .map(|i| Proposal {
            bbox: scored[i].0,
            prior: scored[i].1,
        })
        .collect()
}
