//! Parameters and differentiable forward passes.
//!
//! Layer map: four stride-2 stages (GroupNorm + ReLU), a top-down pyramid
//! over the configured stages, shared first-stage towers (objectness from
//! the classification tower, deltas and IoU prediction from the regression
//! tower), and a two-layer perceptron over 7x7 crops of the finest pyramid
//! level. Mixup acts on backbone stage outputs; SSMC and the domain
//! classifier read the last stage.

use std::collections::HashMap;

use aqua_autodiff::{concat, ParamStore, Tape, Tensor, Var};
use aqua_core::boxgeom::{generate_anchors, ANCHORS_PER_CELL};
use aqua_core::{BBox, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DetectorConfig, NUM_STAGES};
use crate::error::{DetectorError, Result};

const GN_EPS: f64 = 1e-5;
const DOMAIN_HIDDEN: usize = 64;

/// Pixel normalisation applied to every input image.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Anchors of one pyramid level in head-output order.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLayout {
    pub stage: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// First anchor of this level in the per-image anchor list.
    pub start: usize,
    /// Anchor `a` of cell `p` sits at `start + a * height * width + p`.
    pub anchors: Vec<BBox>,
}

impl LevelLayout {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Per-image anchor list for a given input size.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLayout {
    pub image_width: usize,
    pub image_height: usize,
    pub levels: Vec<LevelLayout>,
    pub anchors: Vec<BBox>,
}

impl AnchorLayout {
    pub fn new(config: &DetectorConfig, width: usize, height: usize) -> Self {
        let mut levels = Vec::new();
        let mut all = Vec::new();
        for &stage in &config.levels {
            let stride = DetectorConfig::stride(stage);
            let (h, w) = (height / stride, width / stride);
            let grid = generate_anchors(h, w, stride as f64, config.anchor_scale);
            // cell-major -> anchor-major
            let mut anchors = Vec::with_capacity(grid.anchors.len());
            for a in 0..ANCHORS_PER_CELL {
                for p in 0..h * w {
                    anchors.push(grid.anchors[p * ANCHORS_PER_CELL + a]);
                }
            }
            levels.push(LevelLayout {
                stage,
                stride,
                height: h,
                width: w,
                start: all.len(),
                anchors: anchors.clone(),
            });
            all.extend(anchors);
        }
        Self {
            image_width: width,
            image_height: height,
            levels,
            anchors: all,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Full(f64),
}

/// Calls `add` for every parameter in store order.
fn visit_params(config: &DetectorConfig, mut add: impl FnMut(String, &[usize], Init)) {
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

    let mut c_in = 3;
    for s in 0..NUM_STAGES {
        let c = config.widths[s];
        for j in 0..config.stage_depth {
            let p = format!("backbone.s{}.c{j}", s + 1);
            let cin = if j == 0 { c_in } else { c };
            add(format!("{p}.w"), &[c, cin, 3, 3], Init::Normal(he(cin * 9)));
            add(format!("{p}.b"), &[c], Init::Zeros);
            add(format!("{p}.gn_g"), &[c], Init::Ones);
            add(format!("{p}.gn_b"), &[c], Init::Zeros);
        }
        c_in = c;
    }
    let f = config.fpn_channels;
    for &l in &config.levels {
        let c = config.widths[l - 1];
        add(format!("fpn.p{l}.lat.w"), &[f, c, 1, 1], Init::Normal(he(c)));
        add(format!("fpn.p{l}.lat.b"), &[f], Init::Zeros);
        add(format!("fpn.p{l}.out.w"), &[f, f, 3, 3], Init::Normal(he(f * 9)));
        add(format!("fpn.p{l}.out.b"), &[f], Init::Zeros);
    }
    for tower in ["cls", "reg"] {
        for i in 0..config.head_depth {
            let p = format!("rpn.{tower}{i}");
            add(format!("{p}.w"), &[f, f, 3, 3], Init::Normal(he(f * 9)));
            add(format!("{p}.b"), &[f], Init::Zeros);
            add(format!("{p}.gn_g"), &[f], Init::Ones);
            add(format!("{p}.gn_b"), &[f], Init::Zeros);
        }
    }
    let a = ANCHORS_PER_CELL;
    let pi = config.prior_prob;
    add("rpn.obj.w".into(), &[a, f, 3, 3], Init::Normal(0.01));
    add("rpn.obj.b".into(), &[a], Init::Full(-((1.0 - pi) / pi).ln()));
    add("rpn.delta.w".into(), &[4 * a, f, 3, 3], Init::Normal(0.01));
    add("rpn.delta.b".into(), &[4 * a], Init::Zeros);
    add("rpn.iou.w".into(), &[a, f, 3, 3], Init::Normal(0.01));
    add("rpn.iou.b".into(), &[a], Init::Zeros);

    let roi_in = f * config.roi_size * config.roi_size;
    let h = config.rcnn_hidden;
    add("rcnn.fc1.w".into(), &[h, roi_in], Init::Normal(he(roi_in)));
    add("rcnn.fc1.b".into(), &[h], Init::Zeros);
    add("rcnn.fc2.w".into(), &[h, h], Init::Normal(he(h)));
    add("rcnn.fc2.b".into(), &[h], Init::Zeros);
    add("rcnn.cls.w".into(), &[config.num_classes + 1, h], Init::Normal(0.01));
    add("rcnn.cls.b".into(), &[config.num_classes + 1], Init::Zeros);
    add("rcnn.reg.w".into(), &[4, h], Init::Normal(0.001));
    add("rcnn.reg.b".into(), &[4], Init::Zeros);

    let top = config.widths[NUM_STAGES - 1];
    add("domain.fc1.w".into(), &[DOMAIN_HIDDEN, top], Init::Normal(he(top)));
    add("domain.fc1.b".into(), &[DOMAIN_HIDDEN], Init::Zeros);
    add("domain.fc2.w".into(), &[config.num_domains, DOMAIN_HIDDEN], Init::Normal(he(DOMAIN_HIDDEN)));
    add("domain.fc2.b".into(), &[config.num_domains], Init::Zeros);
}

/// Names and shapes of the parameter set, without allocating it.
pub(crate) fn param_shapes(config: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    visit_params(config, |name, shape, _| out.push((name, shape.to_vec())));
    out
}

/// Builds the parameter set of a detector.
pub(crate) fn init_params(config: &DetectorConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    visit_params(config, |name, shape, init| {
        let t = match init {
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| d.sample(&mut rng))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Full(v) => Tensor::full(shape, v),
        };
        ps.add(name, t);
    });
    ps
}

/// Parameters placed on a tape, addressable by name.
pub(crate) struct Bound<'a, 't> {
    pub vars: Vec<Var<'t>>,
    index: &'a HashMap<String, usize>,
}

impl<'a, 't> Bound<'a, 't> {
    /// Trainable leaves when `trainable`, constants otherwise.
    pub fn new(tape: &'t Tape, params: &ParamStore, index: &'a HashMap<String, usize>, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self { vars, index }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }
}

/// Stack images into a normalised `[n, 3, h, w]` tensor.
pub fn image_batch(images: &[Image], multiple: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| DetectorError::Batch("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    if w % multiple != 0 || h % multiple != 0 || w == 0 || h == 0 {
        return Err(DetectorError::Batch(format!("image size {w}x{h} is not a positive multiple of {multiple}")));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for (i, img) in images.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(DetectorError::Batch(format!(
                "image {i} is {}x{}, expected {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.to_chw().data().iter().map(|v| (v - INPUT_MEAN) / INPUT_STD));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data))
}

fn conv_gn_relu<'t>(b: &Bound<'_, 't>, x: Var<'t>, prefix: &str, stride: usize, groups: usize) -> Var<'t> {
    x.conv2d(b.get(&format!("{prefix}.w")), b.get(&format!("{prefix}.b")), stride, 1)
        .group_norm(b.get(&format!("{prefix}.gn_g")), b.get(&format!("{prefix}.gn_b")), groups, GN_EPS)
        .relu()
}

/// Backbone outputs of the main stream, plus what the DG losses read.
pub(crate) struct BackboneOut<'t> {
    /// Stage outputs after mixing (stage 1 first).
    pub stages: Vec<Var<'t>>,
    /// Last-stage main features before mixing.
    pub last_unmixed: Var<'t>,
    pub branch_last: Option<Var<'t>>,
}

pub(crate) fn backbone<'t>(
    config: &DetectorConfig,
    b: &Bound<'_, 't>,
    main: Var<'t>,
    branch: Option<Var<'t>>,
    mix: &[Option<f64>; NUM_STAGES],
) -> BackboneOut<'t> {
    let stage = |x: Var<'t>, s: usize| {
        let mut x = x;
        for j in 0..config.stage_depth {
            let stride = if j == 0 { 2 } else { 1 };
            x = conv_gn_relu(b, x, &format!("backbone.s{}.c{j}", s + 1), stride, config.backbone_groups);
        }
        x
    };
    let (mut m, mut br) = (main, branch);
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut last_unmixed = m;
    for (s, lambda) in mix.iter().enumerate() {
        let raw = stage(m, s);
        let next_branch = br.map(|x| if x.same_node(&m) { raw } else { stage(x, s) });
        last_unmixed = raw;
        m = match (lambda, next_branch) {
            (Some(l), Some(o)) => raw.mix(o, *l),
            _ => raw,
        };
        br = next_branch;
        stages.push(m);
    }
    BackboneOut {
        stages,
        last_unmixed,
        branch_last: br,
    }
}

/// Top-down pyramid over `config.levels`; finest level first.
pub(crate) fn pyramid<'t>(config: &DetectorConfig, b: &Bound<'_, 't>, stages: &[Var<'t>]) -> Vec<Var<'t>> {
    let mut laterals: Vec<Var<'t>> = config
        .levels
        .iter()
        .map(|&l| stages[l - 1].conv2d(b.get(&format!("fpn.p{l}.lat.w")), b.get(&format!("fpn.p{l}.lat.b")), 1, 0))
        .collect();
    for i in (0..laterals.len().saturating_sub(1)).rev() {
        let mut up = laterals[i + 1];
        for _ in config.levels[i]..config.levels[i + 1] {
            up = up.upsample2x();
        }
        laterals[i] = laterals[i] + up;
    }
    laterals
        .into_iter()
        .zip(&config.levels)
        .map(|(x, &l)| x.conv2d(b.get(&format!("fpn.p{l}.out.w")), b.get(&format!("fpn.p{l}.out.b")), 1, 1))
        .collect()
}

/// First-stage logits as `[n, anchors]` tensors (anchor order of
/// [`AnchorLayout`]); deltas come as one tensor per coordinate.
pub(crate) struct HeadOut<'t> {
    pub objectness: Var<'t>,
    pub iou: Var<'t>,
    pub deltas: [Var<'t>; 4],
}

pub(crate) fn first_stage_head<'t>(config: &DetectorConfig, b: &Bound<'_, 't>, levels: &[Var<'t>]) -> HeadOut<'t> {
    let a = ANCHORS_PER_CELL;
    let mut obj = Vec::new();
    let mut iou = Vec::new();
    let mut deltas: [Vec<Var<'t>>; 4] = Default::default();
    for &p in levels {
        let s = p.shape();
        let (n, hw) = (s[0], s[2] * s[3]);
        let mut c = p;
        let mut r = p;
        for i in 0..config.head_depth {
            c = conv_gn_relu(b, c, &format!("rpn.cls{i}"), 1, config.head_groups);
            r = conv_gn_relu(b, r, &format!("rpn.reg{i}"), 1, config.head_groups);
        }
        obj.push(c.conv2d(b.get("rpn.obj.w"), b.get("rpn.obj.b"), 1, 1).reshape(&[n, a * hw]));
        iou.push(r.conv2d(b.get("rpn.iou.w"), b.get("rpn.iou.b"), 1, 1).reshape(&[n, a * hw]));
        // channel k * 9 + a holds coordinate k of anchor a
        let d = r.conv2d(b.get("rpn.delta.w"), b.get("rpn.delta.b"), 1, 1);
        for (k, slot) in deltas.iter_mut().enumerate() {
            slot.push(d.narrow(1, k * a, a).reshape(&[n, a * hw]));
        }
    }
    let cat = |v: &[Var<'t>]| if v.len() == 1 { v[0] } else { concat(v, 1) };
    HeadOut {
        objectness: cat(&obj),
        iou: cat(&iou),
        deltas: std::array::from_fn(|k| cat(&deltas[k])),
    }
}

/// Second-stage class logits `[r, C + 1]` (background last) and
/// normalised deltas `[r, 4]` for `rois` cropped from `finest`.
pub(crate) fn second_stage<'t>(
    config: &DetectorConfig,
    b: &Bound<'_, 't>,
    finest: Var<'t>,
    rois: &[(usize, [f64; 4])],
) -> (Var<'t>, Var<'t>) {
    let stride = DetectorConfig::stride(config.levels[0]) as f64;
    let s = config.roi_size;
    let x = finest
        .roi_align(rois, s, 1.0 / stride, config.roi_samples)
        .reshape(&[rois.len(), config.fpn_channels * s * s])
        .linear(b.get("rcnn.fc1.w"), b.get("rcnn.fc1.b"))
        .relu()
        .linear(b.get("rcnn.fc2.w"), b.get("rcnn.fc2.b"))
        .relu();
    (
        x.linear(b.get("rcnn.cls.w"), b.get("rcnn.cls.b")),
        x.linear(b.get("rcnn.reg.w"), b.get("rcnn.reg.b")),
    )
}

/// Domain classifier over pooled last-stage features.
pub(crate) fn domain_classifier<'t>(b: &Bound<'_, 't>) -> aqua_core::dginvariance::DomainClassifier<'t> {
    aqua_core::dginvariance::DomainClassifier {
        w1: b.get("domain.fc1.w"),
        b1: b.get("domain.fc1.b"),
        w2: b.get("domain.fc2.w"),
        b2: b.get("domain.fc2.b"),
    }
}
