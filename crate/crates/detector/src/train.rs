//! Training steps for every experimental condition.

use std::collections::BTreeMap;

use aqua_autodiff::{Sgd, Tape, Tensor};
use aqua_core::dginvariance::sample_mix_ratios;
use aqua_core::{BBox, Image};
use serde::{Deserialize, Serialize};

use crate::config::{DgConfig, TrainConfig, TrainMode, NUM_STAGES};
use crate::detector::Detector;
use crate::error::{DetectorError, Result};
use crate::model::{self, BackboneOut};
use crate::objective::{detection_objective, ForwardInputs};
use crate::derive_seed;

/// Smoothing of the running loss averages.
const RUNNING_DECAY: f64 = 0.9;
/// Stream offset separating the mix-ratio draws from the RoI sampling seeds.
const MIX_STREAM: u64 = 0x6d69_7872_6174_696f;

/// One annotated training image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    /// Source-domain index, used by the domain classifier and IRM environments.
    pub domain: usize,
}

/// Main images with same-scene renderings from another domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub main: Vec<TrainImage>,
    pub branch: Vec<TrainImage>,
}

impl PairedBatch {
    /// Pairs must share annotations exactly.
    pub fn new(main: Vec<TrainImage>, branch: Vec<TrainImage>) -> Result<Self> {
        if main.len() != branch.len() {
            return Err(DetectorError::Batch(format!("{} main images but {} branch images", main.len(), branch.len())));
        }
        for (index, (m, b)) in main.iter().zip(&branch).enumerate() {
            if m.boxes != b.boxes || m.classes != b.classes {
                return Err(DetectorError::AnnotationMismatch { index });
            }
        }
        Ok(Self { main, branch })
    }
}

/// Mirror an image and its boxes left to right.
pub fn hflip(sample: &TrainImage) -> TrainImage {
    let img = &sample.image;
    let w = img.width();
    let flipped = Image::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y));
    let wf = w as f64;
    TrainImage {
        image: flipped,
        boxes: sample
            .boxes
            .iter()
            .map(|b| BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2).expect("mirrored box stays valid"))
            .collect(),
        classes: sample.classes.clone(),
        domain: sample.domain,
    }
}

/// Everything besides weights and momentum needed to resume a run exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
    /// Exponential moving averages of the loss components.
    pub running: BTreeMap<String, f64>,
    /// Digest of the checkpoint this run was resumed from.
    pub parent_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Weighted components in a fixed order; they sum to `total`.
    pub components: Vec<(String, f64)>,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepReport {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.0 == name).map(|c| c.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub(crate) detector: Detector,
    pub(crate) sgd: Sgd,
    pub(crate) state: TrainState,
    pub(crate) train: TrainConfig,
    pub(crate) dg: DgConfig,
    pub(crate) mode: TrainMode,
}

impl Trainer {
    /// Toggles in `dg` are overridden by `mode`.
    pub fn new(detector: Detector, train: TrainConfig, dg: DgConfig, mode: TrainMode) -> Result<Self> {
        train.validate()?;
        let dg = mode.resolve(&dg);
        dg.validate()?;
        let sgd = Sgd::new(train.sgd(), detector.params());
        let state = TrainState {
            seed: train.seed,
            ..TrainState::default()
        };
        Ok(Self {
            detector,
            sgd,
            state,
            train,
            dg,
            mode,
        })
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn into_detector(self) -> Detector {
        self.detector
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn dg_config(&self) -> &DgConfig {
        &self.dg
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.train.steps
    }

    /// One update on unpaired images.
    pub fn train_step(&mut self, batch: &[TrainImage]) -> Result<StepReport> {
        self.step_inner(batch, None)
    }

    /// One update on paired images. Modes without a second stream use only
    /// the main images.
    pub fn dg_train_step(&mut self, batch: &PairedBatch) -> Result<StepReport> {
        let checked = PairedBatch::new(batch.main.clone(), batch.branch.clone())?;
        self.step_inner(&checked.main, Some(&checked.branch))
    }

    /// Loss components at the current weights with the sampling seeds of
    /// `step`, without updating anything.
    pub fn evaluate_loss(&self, batch: &[TrainImage], branch: Option<&[TrainImage]>, step: u64) -> Result<Vec<(String, f64)>> {
        let tape = Tape::new();
        let (components, _) = self.forward(&tape, batch, branch, false, step)?;
        Ok(components.into_iter().map(|(n, v)| (n.to_string(), v.item())).collect())
    }

    fn forward<'a, 't>(
        &'a self,
        tape: &'t Tape,
        batch: &[TrainImage],
        branch: Option<&[TrainImage]>,
        trainable: bool,
        step: u64,
    ) -> Result<(Vec<(&'static str, aqua_autodiff::Var<'t>)>, model::Bound<'a, 't>)> {
        let config = self.detector.config();
        validate_batch(batch, config.num_classes)?;
        let step_seed = derive_seed(self.state.seed, step);
        let images: Vec<Image> = batch.iter().map(|t| t.image.clone()).collect();
        let x = model::image_batch(&images, config.input_multiple())?;
        let (h, w) = (x.dim(2), x.dim(3));
        let main = tape.constant(x.clone());

        let two_stream = self.dg.dmx || self.dg.ssmc;
        let branch_var = match branch {
            Some(br) if two_stream => {
                let imgs: Vec<Image> = br.iter().map(|t| t.image.clone()).collect();
                let y = model::image_batch(&imgs, config.input_multiple())?;
                if y.shape() != x.shape() {
                    return Err(DetectorError::Batch("branch images differ in size from main images".into()));
                }
                Some(if bitwise_equal(&x, &y) { main } else { tape.constant(y) })
            }
            _ => None,
        };
        let mut mix = [None; NUM_STAGES];
        if self.dg.dmx && branch_var.is_some() {
            let plan = sample_mix_ratios(&self.dg.dmx_layers, self.dg.dmx_alpha, derive_seed(step_seed, MIX_STREAM))?;
            for (s, slot) in mix.iter_mut().enumerate() {
                *slot = plan.lambda_for(s + 1);
            }
        }

        let bound = self.detector.bind(tape, trainable);
        let backbone: BackboneOut<'t> = model::backbone(config, &bound, main, branch_var, &mix);
        let layout = self.detector.layout(w, h);
        let objective = detection_objective(ForwardInputs {
            config,
            dg: &self.dg,
            bound: &bound,
            backbone: &backbone,
            batch,
            layout: &layout,
            seed: step_seed,
        })?;
        Ok((objective.components, bound))
    }

    fn step_inner(&mut self, batch: &[TrainImage], branch: Option<&[TrainImage]>) -> Result<StepReport> {
        let step = self.state.step;
        let tape = Tape::new();
        let (components, grads, total) = {
            let (components, bound) = self.forward(&tape, batch, branch, true, step)?;
            let mut total = components[0].1;
            for c in &components[1..] {
                total = total + c.1;
            }
            let values: Vec<(String, f64)> = components.iter().map(|(n, v)| (n.to_string(), v.item())).collect();
            for (name, v) in &values {
                if !v.is_finite() {
                    return Err(DetectorError::NonFinite {
                        step,
                        component: name.clone(),
                    });
                }
            }
            let t = total.item();
            if t > self.train.divergence_threshold {
                return Err(DetectorError::Divergence {
                    step,
                    component: "total".into(),
                    value: t,
                });
            }
            let g = tape.backward(total);
            let grads: Vec<Tensor> = bound.vars.iter().map(|v| g.get_or_zeros(*v)).collect();
            (values, grads, t)
        };
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.all_finite()) {
            return Err(DetectorError::NonFinite {
                step,
                component: format!("gradient of {}", self.detector.params().names()[i]),
            });
        }
        let lr = self.train.lr_at(step);
        let grad_norm = self.sgd.step(self.detector.params_mut(), &grads, lr);
        for (name, v) in components.iter().chain(std::iter::once(&("total".to_string(), total))) {
            self.state
                .running
                .entry(name.clone())
                .and_modify(|r| *r = RUNNING_DECAY * *r + (1.0 - RUNNING_DECAY) * v)
                .or_insert(*v);
        }
        self.state.step += 1;
        Ok(StepReport {
            step,
            lr,
            components,
            total,
            grad_norm,
        })
    }
}

fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn validate_batch(batch: &[TrainImage], num_classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(DetectorError::Batch("empty batch".into()));
    }
    for (i, t) in batch.iter().enumerate() {
        if t.boxes.len() != t.classes.len() {
            return Err(DetectorError::Batch(format!("image {i}: {} boxes but {} classes", t.boxes.len(), t.classes.len())));
        }
        if let Some(c) = t.classes.iter().find(|&&c| c >= num_classes) {
            return Err(DetectorError::Batch(format!("image {i}: class {c} out of range")));
        }
    }
    Ok(())
}
