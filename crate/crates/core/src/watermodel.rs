//! Underwater image formation, per-domain colour transforms, bilateral-grid
//! colour transfer with its training losses, and image corruptions.

use std::str::FromStr;

use aqua_autodiff::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::image::Image;

/// Instance-norm variance guard.
pub const CIN_EPS: f64 = 1e-5;

/// Scene depth in metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthMap {
    Uniform { depth: f64 },
    /// Linear in the row index, `top` on the first row and `bottom` on the last.
    VerticalRamp { top: f64, bottom: f64 },
}

impl DepthMap {
    pub fn at(&self, y: usize, height: usize) -> f64 {
        match *self {
            Self::Uniform { depth } => depth,
            Self::VerticalRamp { top, bottom } => {
                let f = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
                top + (bottom - top) * f
            }
        }
    }

    fn extremes(&self) -> [f64; 2] {
        match *self {
            Self::Uniform { depth } => [depth, depth],
            Self::VerticalRamp { top, bottom } => [top, bottom],
        }
    }
}

/// Parameters of `I = J t + B (1 - t)` with `t = nrer^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaterParams {
    pub background_light: [f64; 3],
    /// Normalised residual energy ratio per channel, in `(0, 1]`.
    pub nrer: [f64; 3],
    pub depth: DepthMap,
}

impl WaterParams {
    pub fn clear() -> Self {
        Self {
            background_light: [0.0; 3],
            nrer: [1.0; 3],
            depth: DepthMap::Uniform { depth: 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &b in &self.background_light {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::OutOfRange {
                    name: "background_light",
                    value: b,
                    expected: "[0, 1]",
                });
            }
        }
        for &n in &self.nrer {
            if !(n > 0.0 && n <= 1.0) {
                return Err(Error::OutOfRange {
                    name: "nrer",
                    value: n,
                    expected: "(0, 1]",
                });
            }
        }
        for d in self.depth.extremes() {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::OutOfRange {
                    name: "depth",
                    value: d,
                    expected: ">= 0",
                });
            }
        }
        Ok(())
    }

    pub fn transmission(&self, channel: usize, depth: f64) -> f64 {
        self.nrer[channel].powf(depth)
    }
}

pub fn ifm_synthesize(j: &Image, params: &WaterParams) -> Image {
    let (w, h) = (j.width(), j.height());
    let mut out = j.clone();
    for y in 0..h {
        let d = params.depth.at(y, h);
        let t: [f64; 3] = std::array::from_fn(|c| params.transmission(c, d));
        for x in 0..w {
            let p = j.pixel(x, y);
            let b = params.background_light;
            out.set_pixel(x, y, std::array::from_fn(|c| p[c] * t[c] + b[c] * (1.0 - t[c])));
        }
    }
    out
}

/// Per-channel `gain * v + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelAffine {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub water: WaterParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<ChannelAffine>,
}

impl DomainSpec {
    pub fn identity(domain_id: usize) -> Self {
        Self {
            domain_id,
            name: format!("identity{domain_id}"),
            water: WaterParams::clear(),
            post: None,
        }
    }
}

/// Colour-only image transform of one domain: the IFM followed by the
/// optional affine, clamped to `[0, 1]`. Applying two transforms in a row is
/// their composition; transforms are not idempotent in general.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    spec: DomainSpec,
}

impl DomainTransform {
    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = ifm_synthesize(image, &self.spec.water);
        if let Some(a) = &self.spec.post {
            for px in out.data_mut().chunks_mut(3) {
                for c in 0..3 {
                    px[c] = a.gain[c] * px[c] + a.bias[c];
                }
            }
        }
        out.clamp01()
    }

    pub fn is_identity(&self) -> bool {
        self.spec.water.depth.extremes() == [0.0, 0.0] && self.spec.post.is_none()
    }
}

pub fn make_domain_transform(spec: &DomainSpec) -> Result<DomainTransform> {
    spec.water.validate()?;
    Ok(DomainTransform { spec: spec.clone() })
}

/// The seven stock domains: six sources followed by the held-out target.
pub fn preset_domains() -> Vec<DomainSpec> {
    let water = |b: [f64; 3], n: [f64; 3], top: f64, bottom: f64| WaterParams {
        background_light: b,
        nrer: n,
        depth: DepthMap::VerticalRamp { top, bottom },
    };
    let affine = |gain: [f64; 3], bias: [f64; 3]| Some(ChannelAffine { gain, bias });
    let mk = |id: usize, name: &str, w: WaterParams, post: Option<ChannelAffine>| DomainSpec {
        domain_id: id,
        name: name.to_string(),
        water: w,
        post,
    };
    vec![
        mk(0, "clear_blue", water([0.05, 0.35, 0.55], [0.80, 0.95, 0.97], 1.0, 3.0), None),
        mk(1, "deep_blue", water([0.02, 0.20, 0.45], [0.70, 0.90, 0.95], 3.0, 6.0), None),
        mk(2, "green_coastal", water([0.10, 0.45, 0.30], [0.75, 0.93, 0.88], 2.0, 4.0), None),
        mk(3, "turquoise", water([0.05, 0.50, 0.50], [0.72, 0.96, 0.94], 1.5, 4.5), affine([1.0, 1.0, 1.0], [0.0, 0.02, 0.02])),
        mk(4, "dim_teal", water([0.04, 0.30, 0.35], [0.78, 0.92, 0.92], 2.0, 5.0), affine([0.85, 0.85, 0.85], [0.0, 0.0, 0.0])),
        mk(5, "bright_cyan", water([0.15, 0.55, 0.65], [0.85, 0.96, 0.97], 0.5, 2.5), affine([1.1, 1.05, 1.05], [0.02, 0.0, 0.0])),
        mk(6, "turbid_yellow", water([0.55, 0.55, 0.20], [0.80, 0.84, 0.62], 3.0, 6.0), affine([1.05, 1.0, 0.9], [0.02, 0.0, 0.0])),
    ]
}

/// Per-style CIN scale and shift vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CinBank {
    pub gammas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
}

/// `gamma_s * (x - mu) / sqrt(var + eps) + beta_s` per channel of `[C, H, W]`.
pub fn conditional_instance_norm(x: &Tensor, style_id: usize, bank: &CinBank) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::Invalid(format!("expected [C, H, W], got {:?}", x.shape())));
    }
    let (gamma, beta) = match (bank.gammas.get(style_id), bank.betas.get(style_id)) {
        (Some(g), Some(b)) => (g, b),
        _ => {
            return Err(Error::Unknown {
                what: "style id",
                name: style_id.to_string(),
            })
        }
    };
    let (c, hw) = (x.dim(0), x.dim(1) * x.dim(2));
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(vec![c], vec![gamma.len(), beta.len()]));
    }
    let mut out = x.clone();
    for ch in 0..c {
        let v = &x.data()[ch * hw..(ch + 1) * hw];
        let mu = v.iter().sum::<f64>() / hw as f64;
        let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / hw as f64;
        let sd = (var + CIN_EPS).sqrt();
        for (o, a) in out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(v) {
            *o = gamma[ch] * (a - mu) / sd + beta[ch];
        }
    }
    Ok(out)
}

/// Row-major 3x4 colour matrix `[M | b]`.
pub type Affine = [f64; 12];

pub const IDENTITY_AFFINE: Affine = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Lattice of affine colour matrices over (x, y, guidance).
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralGrid {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    /// Indexed by `(k * height + j) * width + i`.
    pub cells: Vec<Affine>,
}

impl BilateralGrid {
    pub const DEFAULT_DIMS: (usize, usize, usize) = (16, 16, 8);

    pub fn constant(width: usize, height: usize, depth: usize, m: Affine) -> Self {
        Self {
            width,
            height,
            depth,
            cells: vec![m; width * height * depth],
        }
    }

    pub fn identity(width: usize, height: usize, depth: usize) -> Self {
        Self::constant(width, height, depth, IDENTITY_AFFINE)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.height + j) * self.width + i
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> &Affine {
        &self.cells[self.index(i, j, k)]
    }
}

/// Per-pixel affine matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    pub width: usize,
    pub height: usize,
    pub mats: Vec<Affine>,
}

impl AffineField {
    pub fn uniform(width: usize, height: usize, m: Affine) -> Self {
        Self {
            width,
            height,
            mats: vec![m; width * height],
        }
    }

    /// The field applying `inner` first, then `self`.
    pub fn compose(&self, inner: &AffineField) -> Result<AffineField> {
        if (self.width, self.height) != (inner.width, inner.height) {
            return Err(Error::ShapeMismatch(vec![self.height, self.width], vec![inner.height, inner.width]));
        }
        let mats = self.mats.iter().zip(&inner.mats).map(|(a, b)| compose_affine(a, b)).collect();
        Ok(AffineField {
            width: self.width,
            height: self.height,
            mats,
        })
    }
}

fn compose_affine(outer: &Affine, inner: &Affine) -> Affine {
    let mut m = [0.0; 12];
    for r in 0..3 {
        for c in 0..4 {
            let mut v = if c == 3 { outer[r * 4 + 3] } else { 0.0 };
            for k in 0..3 {
                v += outer[r * 4 + k] * inner[k * 4 + c];
            }
            m[r * 4 + c] = v;
        }
    }
    m
}

pub fn tent(v: f64) -> f64 {
    (1.0 - v.abs()).max(0.0)
}

/// Lattice coordinate of pixel `p` on an axis of `n` pixels and `cells`
/// cells: pixel 0 maps to cell 0 and the last pixel to the last cell.
fn lattice_coord(p: usize, n: usize, cells: usize) -> f64 {
    if n > 1 && cells > 1 {
        p as f64 * (cells - 1) as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Slice the grid at every pixel with tent weights in x, y and guidance
/// (`g * (depth - 1)`), normalised to unit sum.
pub fn slice_bilateral_grid(grid: &BilateralGrid, guidance: &[f64], width: usize, height: usize) -> Result<AffineField> {
    if guidance.len() != width * height {
        return Err(Error::ShapeMismatch(vec![height, width], vec![guidance.len()]));
    }
    let mut mats = Vec::with_capacity(width * height);
    for y in 0..height {
        let gy = lattice_coord(y, height, grid.height);
        for x in 0..width {
            let gx = lattice_coord(x, width, grid.width);
            let gz = guidance[y * width + x].clamp(0.0, 1.0) * (grid.depth.max(1) - 1) as f64;
            let mut acc = [0.0; 12];
            let mut wsum = 0.0;
            let range = |c: f64, n: usize| (c.floor().max(0.0) as usize)..=((c.ceil() as usize).min(n - 1));
            for k in range(gz, grid.depth) {
                let wz = tent(gz - k as f64);
                for j in range(gy, grid.height) {
                    let wy = tent(gy - j as f64);
                    for i in range(gx, grid.width) {
                        let wt = tent(gx - i as f64) * wy * wz;
                        if wt == 0.0 {
                            continue;
                        }
                        wsum += wt;
                        for (a, m) in acc.iter_mut().zip(grid.cell(i, j, k)) {
                            *a += wt * m;
                        }
                    }
                }
            }
            if wsum > 0.0 {
                acc.iter_mut().for_each(|a| *a /= wsum);
            }
            mats.push(acc);
        }
    }
    Ok(AffineField { width, height, mats })
}

/// `O = M I + b` at every pixel.
pub fn apply_affine_color(image: &Image, field: &AffineField) -> Result<Image> {
    if (image.width(), image.height()) != (field.width, field.height) {
        return Err(Error::ShapeMismatch(
            vec![image.height(), image.width()],
            vec![field.height, field.width],
        ));
    }
    let mut out = image.clone();
    for (px, m) in out.data_mut().chunks_mut(3).zip(&field.mats) {
        let i = [px[0], px[1], px[2]];
        for r in 0..3 {
            px[r] = m[r * 4] * i[0] + m[r * 4 + 1] * i[1] + m[r * 4 + 2] * i[2] + m[r * 4 + 3];
        }
    }
    Ok(out)
}

/// `F F^T / (C H W)` of a `[C, H, W]` map, row-major `C x C`.
pub fn gram_matrix(f: &Tensor) -> Vec<f64> {
    let (c, hw) = (f.dim(0), f.numel() / f.dim(0).max(1));
    let norm = (c * hw) as f64;
    let mut g = vec![0.0; c * c];
    for a in 0..c {
        let fa = &f.data()[a * hw..(a + 1) * hw];
        for b in a..c {
            let fb = &f.data()[b * hw..(b + 1) * hw];
            let v = fa.iter().zip(fb).map(|(x, y)| x * y).sum::<f64>() / norm;
            g[a * c + b] = v;
            g[b * c + a] = v;
        }
    }
    g
}

/// Squared Frobenius distance between Gram matrices.
pub fn gram_style_distance(f1: &Tensor, f2: &Tensor) -> Result<f64> {
    if f1.ndim() != 3 || f2.ndim() != 3 || f1.dim(0) != f2.dim(0) {
        return Err(Error::ShapeMismatch(f1.shape().to_vec(), f2.shape().to_vec()));
    }
    Ok(gram_distance(&gram_matrix(f1), &gram_matrix(f2)))
}

pub fn gram_distance(g1: &[f64], g2: &[f64]) -> f64 {
    g1.iter().zip(g2).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Produces a list of `[C, H, W]` feature maps for an image.
pub trait FeatureExtractor {
    fn features(&self, image: &Image) -> Vec<Tensor>;
}

/// Fixed random 3x3 conv + ReLU stack; strides 1, 2, 2.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    layers: Vec<(Tensor, Tensor, usize)>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(3, 8, 1), (8, 16, 2), (16, 16, 2)];
        let layers = spec
            .iter()
            .map(|&(cin, cout, stride)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                });
                (w, Tensor::zeros(&[cout]), stride)
            })
            .collect();
        Self { layers }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, image: &Image) -> Vec<Tensor> {
        let tape = Tape::new();
        let (h, w) = (image.height(), image.width());
        let mut x = tape.constant(image.to_chw().reshape(&[1, 3, h, w]));
        let mut out = Vec::new();
        for (wt, b, stride) in &self.layers {
            x = x.conv2d(tape.constant(wt.clone()), tape.constant(b.clone()), *stride, 1).relu();
            let v = x.value();
            let s = v.shape();
            out.push(v.as_ref().clone().reshape(&s[1..]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbstWeights {
    pub content: f64,
    pub style: f64,
    pub regularizer: f64,
    pub mask: f64,
}

impl Default for CbstWeights {
    fn default() -> Self {
        Self {
            content: 0.5,
            style: 1.0,
            regularizer: 0.015,
            mask: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CbstLosses {
    pub content: f64,
    pub style: f64,
    pub regularizer: f64,
    pub mask: f64,
    pub total: f64,
}

/// Mask weight outside annotated boxes.
pub const MASK_BACKGROUND: f64 = 0.01;

fn channel_stats(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, hw) = (f.dim(0), f.numel() / f.dim(0));
    let mut mu = vec![0.0; c];
    let mut sd = vec![0.0; c];
    for ch in 0..c {
        let v = &f.data()[ch * hw..(ch + 1) * hw];
        mu[ch] = v.iter().sum::<f64>() / hw as f64;
        sd[ch] = (v.iter().map(|a| (a - mu[ch]).powi(2)).sum::<f64>() / hw as f64).sqrt();
    }
    (mu, sd)
}

/// Sum over every cell of the squared Frobenius distance to each of its
/// (up to six) axis neighbours; every adjacent pair is therefore counted
/// twice.
pub fn grid_regularizer(grid: &BilateralGrid) -> f64 {
    let mut total = 0.0;
    for k in 0..grid.depth {
        for j in 0..grid.height {
            for i in 0..grid.width {
                let a = grid.cell(i, j, k);
                let mut visit = |ii: isize, jj: isize, kk: isize| {
                    if ii < 0 || jj < 0 || kk < 0 {
                        return;
                    }
                    let (ii, jj, kk) = (ii as usize, jj as usize, kk as usize);
                    if ii >= grid.width || jj >= grid.height || kk >= grid.depth {
                        return;
                    }
                    total += gram_distance(a, grid.cell(ii, jj, kk));
                };
                let (i, j, k) = (i as isize, j as isize, k as isize);
                visit(i - 1, j, k);
                visit(i + 1, j, k);
                visit(i, j - 1, k);
                visit(i, j + 1, k);
                visit(i, j, k - 1);
                visit(i, j, k + 1);
            }
        }
    }
    total
}

/// Pixel weights: 1 inside any box (by pixel centre), [`MASK_BACKGROUND`] elsewhere.
pub fn box_mask(width: usize, height: usize, boxes: &[BBox]) -> Vec<f64> {
    let mut m = vec![MASK_BACKGROUND; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if boxes.iter().any(|b| px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2) {
                m[y * width + x] = 1.0;
            }
        }
    }
    m
}

pub fn cbst_losses(
    output: &Image,
    content: &Image,
    style: &Image,
    grid: &BilateralGrid,
    mask_boxes: &[BBox],
    extractor: &dyn FeatureExtractor,
    weights: CbstWeights,
) -> Result<CbstLosses> {
    let (w, h) = (content.width(), content.height());
    if (output.width(), output.height()) != (w, h) {
        return Err(Error::ShapeMismatch(vec![output.height(), output.width()], vec![h, w]));
    }
    let fo = extractor.features(output);
    let fc = extractor.features(content);
    let fs = extractor.features(style);
    let mut lc = 0.0;
    let mut ls = 0.0;
    for ((o, c), s) in fo.iter().zip(&fc).zip(&fs) {
        lc += o.data().iter().zip(c.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let (mo, so) = channel_stats(o);
        let (ms, ss) = channel_stats(s);
        ls += gram_distance(&mo, &ms) + gram_distance(&so, &ss);
    }
    let lr = grid_regularizer(grid);
    let mask = box_mask(w, h, mask_boxes);
    let mut sq = 0.0;
    for (p, m) in mask.iter().enumerate() {
        for c in 0..3 {
            let d = (output.data()[p * 3 + c] - content.data()[p * 3 + c]) * m;
            sq += d * d;
        }
    }
    let lm = sq.sqrt() / (h * w * 3) as f64;
    Ok(CbstLosses {
        content: lc,
        style: ls,
        regularizer: lr,
        mask: lm,
        total: weights.content * lc + weights.style * ls + weights.regularizer * lr + weights.mask * lm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Brightness,
    Contrast,
    DefocusBlur,
    MotionBlur,
    Pixelate,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        Self::GaussianNoise,
        Self::Brightness,
        Self::Contrast,
        Self::DefocusBlur,
        Self::MotionBlur,
        Self::Pixelate,
        Self::Jpeg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::DefocusBlur => "defocus_blur",
            Self::MotionBlur => "motion_blur",
            Self::Pixelate => "pixelate",
            Self::Jpeg => "jpeg",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Unknown {
            what: "corruption",
            name: s.to_string(),
        })
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Noise standard deviation per severity 1..=5.
pub const NOISE_SIGMA: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.10];
const BRIGHTNESS: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];
const CONTRAST: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];
const DEFOCUS_RADIUS: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
const MOTION_LENGTH: [usize; 5] = [3, 5, 7, 9, 11];
const PIXEL_BLOCK: [usize; 5] = [2, 3, 4, 5, 6];
const JPEG_STEP: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];

/// Apply `kind` at `severity` (0 is the identity). Only gaussian noise
/// consumes `seed`.
pub fn corrupt_image(image: &Image, kind: CorruptionKind, severity: usize, seed: u64) -> Result<Image> {
    if severity > 5 {
        return Err(Error::OutOfRange {
            name: "severity",
            value: severity as f64,
            expected: "0..=5",
        });
    }
    if severity == 0 {
        return Ok(image.clone());
    }
    let s = severity - 1;
    Ok(match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, NOISE_SIGMA[s]).expect("valid sigma");
            let mut out = image.clone();
            out.data_mut().iter_mut().for_each(|v| *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0));
            out
        }
        CorruptionKind::Brightness => image.map(|v| (v + BRIGHTNESS[s]).clamp(0.0, 1.0)),
        CorruptionKind::Contrast => {
            let m = image.mean();
            image.map(|v| (v - m) * CONTRAST[s] + m)
        }
        CorruptionKind::DefocusBlur => {
            let r = DEFOCUS_RADIUS[s];
            let ri = r.ceil() as isize;
            let mut taps = Vec::new();
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dx * dx + dy * dy) as f64) <= r * r {
                        taps.push((dx, dy));
                    }
                }
            }
            convolve(image, &taps)
        }
        CorruptionKind::MotionBlur => {
            let half = (MOTION_LENGTH[s] / 2) as isize;
            let taps: Vec<(isize, isize)> = (-half..=half).map(|dx| (dx, 0)).collect();
            convolve(image, &taps)
        }
        CorruptionKind::Pixelate => pixelate(image, PIXEL_BLOCK[s]),
        CorruptionKind::Jpeg => dct_quantize(image, JPEG_STEP[s]),
    })
}

/// Box filter over the given offsets with replicated edges.
fn convolve(image: &Image, taps: &[(isize, isize)]) -> Image {
    let (w, h) = (image.width() as isize, image.height() as isize);
    let norm = 1.0 / taps.len() as f64;
    Image::from_fn(image.width(), image.height(), |x, y| {
        let mut acc = [0.0; 3];
        for &(dx, dy) in taps {
            let sx = (x as isize + dx).clamp(0, w - 1) as usize;
            let sy = (y as isize + dy).clamp(0, h - 1) as usize;
            let p = image.pixel(sx, sy);
            for c in 0..3 {
                acc[c] += p[c] * norm;
            }
        }
        acc
    })
}

fn pixelate(image: &Image, block: usize) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ex, ey) = ((bx + block).min(w), (by + block).min(h));
            let mut acc = [0.0; 3];
            for y in by..ey {
                for x in bx..ex {
                    let p = image.pixel(x, y);
                    (0..3).for_each(|c| acc[c] += p[c]);
                }
            }
            let n = ((ex - bx) * (ey - by)) as f64;
            let mean = acc.map(|v| v / n);
            for y in by..ey {
                for x in bx..ex {
                    out.set_pixel(x, y, mean);
                }
            }
        }
    }
    out
}

/// Orthonormal 8x8 block DCT per channel with frequency-scaled uniform
/// quantisation `step * (1 + u + v)`.
fn dct_quantize(image: &Image, step: f64) -> Image {
    const B: usize = 8;
    let basis: Vec<f64> = (0..B * B)
        .map(|i| {
            let (u, x) = (i / B, i % B);
            let a = if u == 0 { (1.0 / B as f64).sqrt() } else { (2.0 / B as f64).sqrt() };
            a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2 * B) as f64).cos()
        })
        .collect();
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for c in 0..3 {
        for by in (0..h).step_by(B) {
            for bx in (0..w).step_by(B) {
                let mut blk = [0.0; B * B];
                for y in 0..B {
                    for x in 0..B {
                        let (sx, sy) = ((bx + x).min(w - 1), (by + y).min(h - 1));
                        blk[y * B + x] = image.pixel(sx, sy)[c];
                    }
                }
                let mut coef = [0.0; B * B];
                for v in 0..B {
                    for u in 0..B {
                        let mut s = 0.0;
                        for y in 0..B {
                            for x in 0..B {
                                s += basis[v * B + y] * basis[u * B + x] * blk[y * B + x];
                            }
                        }
                        let q = step * (1 + u + v) as f64;
                        coef[v * B + u] = (s / q).round() * q;
                    }
                }
                for y in 0..B {
                    for x in 0..B {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for v in 0..B {
                            for u in 0..B {
                                s += basis[v * B + y] * basis[u * B + x] * coef[v * B + u];
                            }
                        }
                        let i = ((by + y) * w + bx + x) * 3 + c;
                        out.data_mut()[i] = s.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}
