//! Classification and box-regression losses.
//!
//! Every loss is generic over [`Real`] so the same expression yields values on
//! `f64`, exact gradients on dual numbers, and scale derivatives for IRM.

use std::f64::consts::PI;
use std::str::FromStr;

use aqua_autodiff::{value_and_grad, Real, SampleLoss};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{BBox, EncodedDelta, DELTA_CLAMP};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

/// Default FIoU suppression exponent.
pub const FIOU_ETA: f64 = 0.5;

fn clamp_prob<R: Real>(p: R) -> R {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Cross entropy for a (possibly soft) target `y`.
pub fn bce<R: Real>(p: R, y: f64) -> R {
    let p = clamp_prob(p);
    -(p.ln() * y + (-p + 1.0).ln() * (1.0 - y))
}

pub fn binary_cross_entropy(p: f64, y: f64) -> Result<f64> {
    check_prob(p)?;
    check_prob(y)?;
    Ok(bce(p, y))
}

/// Cross entropy on a logit `a`, computed through `log_sigmoid` so it stays
/// finite for any `a`.
pub fn bce_with_logit<R: Real>(a: R, y: f64) -> R {
    -(a.log_sigmoid() * y + (-a).log_sigmoid() * (1.0 - y))
}

pub fn focal<R: Real>(p: R, y: f64, alpha: f64, gamma: f64) -> R {
    let p = clamp_prob(p);
    if y >= 0.5 {
        -((-p + 1.0).powf(gamma) * p.ln() * alpha)
    } else {
        -(p.powf(gamma) * (-p + 1.0).ln() * (1.0 - alpha))
    }
}

pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> Result<f64> {
    check_prob(p)?;
    check_label(y)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange {
            name: "alpha",
            value: alpha,
            expected: "[0, 1]",
        });
    }
    if !(gamma >= 0.0) {
        return Err(Error::OutOfRange {
            name: "gamma",
            value: gamma,
            expected: ">= 0",
        });
    }
    Ok(focal(p, y, alpha, gamma))
}

/// Focal loss on a logit; equal to [`focal`] of `sigmoid(a)` away from the
/// probability clamp.
pub fn focal_with_logit<R: Real>(a: R, y: f64, alpha: f64, gamma: f64) -> R {
    if y >= 0.5 {
        -((-a).sigmoid().powf(gamma) * a.log_sigmoid() * alpha)
    } else {
        -(a.sigmoid().powf(gamma) * (-a).log_sigmoid() * (1.0 - alpha))
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::ProbabilityOutOfRange(p))
    }
}

fn check_label(y: f64) -> Result<()> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "label",
            value: y,
            expected: "0 or 1",
        })
    }
}

pub fn l1<R: Real>(e: R) -> R {
    e.abs()
}

pub fn l2<R: Real>(e: R) -> R {
    e.square()
}

pub fn smooth_l1<R: Real>(e: R) -> R {
    let a = e.abs();
    if a.value() < 1.0 {
        a.square() * 0.5
    } else {
        a - 0.5
    }
}

/// Balanced L1 with `b` fixed by `alpha * ln(b + 1) = gamma` and the constant
/// `C` chosen so the two branches meet at `|e| = 1`.
pub fn balanced_l1<R: Real>(e: R, alpha: f64, gamma: f64) -> R {
    let b = (gamma / alpha).exp() - 1.0;
    let a = e.abs();
    if a.value() < 1.0 {
        let u = a * b + 1.0;
        u * u.ln() * (alpha / b) - a * alpha
    } else {
        a * gamma + (gamma / b - alpha)
    }
}

/// Intermediate geometry shared by the IoU family.
struct Overlap<R> {
    iou: R,
    /// Enclosing-box width and height.
    cw: R,
    ch: R,
    union: R,
}

fn overlap<R: Real>(p: [R; 4], t: [R; 4]) -> Overlap<R> {
    let zero = R::cst(0.0);
    let iw = (p[2].min(t[2]) - p[0].max(t[0])).max(zero);
    let ih = (p[3].min(t[3]) - p[1].max(t[1])).max(zero);
    let inter = iw * ih;
    let ap = (p[2] - p[0]) * (p[3] - p[1]);
    let at = (t[2] - t[0]) * (t[3] - t[1]);
    let union = ap + at - inter;
    let iou = if union.value() > 0.0 && ap.value() > 0.0 && at.value() > 0.0 {
        inter / union
    } else {
        zero
    };
    Overlap {
        iou,
        cw: p[2].max(t[2]) - p[0].min(t[0]),
        ch: p[3].max(t[3]) - p[1].min(t[1]),
        union,
    }
}

/// Squared centre distance over squared enclosing diagonal.
fn centre_penalty<R: Real>(p: [R; 4], t: [R; 4], o: &Overlap<R>) -> R {
    let dx = (p[0] + p[2] - t[0] - t[2]) * 0.5;
    let dy = (p[1] + p[3] - t[1] - t[3]) * 0.5;
    let c2 = o.cw.square() + o.ch.square();
    if c2.value() > 0.0 {
        (dx.square() + dy.square()) / c2
    } else {
        R::cst(0.0)
    }
}

pub fn iou_generic<R: Real>(p: [R; 4], t: [R; 4]) -> R {
    overlap(p, t).iou
}

pub fn iou_loss<R: Real>(p: [R; 4], t: [R; 4]) -> R {
    -overlap(p, t).iou + 1.0
}

pub fn giou_loss<R: Real>(p: [R; 4], t: [R; 4]) -> R {
    let o = overlap(p, t);
    let c = o.cw * o.ch;
    let penalty = if c.value() > 0.0 { (c - o.union) / c } else { R::cst(0.0) };
    -o.iou + 1.0 + penalty
}

/// CIoU; the trade-off coefficient `alpha` is held constant under
/// differentiation.
pub fn ciou_loss<R: Real>(p: [R; 4], t: [R; 4]) -> R {
    let o = overlap(p, t);
    let ar = |b: [R; 4]| ((b[2] - b[0]) / (b[3] - b[1])).atan();
    let v = (ar(t) - ar(p)).square() * (4.0 / (PI * PI));
    let denom = 1.0 - o.iou.value() + v.value();
    let alpha = if denom > 0.0 { v.value() / denom } else { 0.0 };
    -o.iou + 1.0 + centre_penalty(p, t, &o) + v * alpha
}

pub fn eiou_loss<R: Real>(p: [R; 4], t: [R; 4]) -> R {
    let o = overlap(p, t);
    let dw = (p[2] - p[0]) - (t[2] - t[0]);
    let dh = (p[3] - p[1]) - (t[3] - t[1]);
    -o.iou + 1.0 + centre_penalty(p, t, &o) + dw.square() / o.cw.square() + dh.square() / o.ch.square()
}

pub fn focal_eiou_loss<R: Real>(p: [R; 4], t: [R; 4], gamma: f64) -> R {
    overlap(p, t).iou.powf(gamma) * eiou_loss(p, t)
}

/// Delta encoding of `b` against `anchor`, differentiable in `b`.
pub fn encode_generic<R: Real>(b: [R; 4], anchor: &BBox) -> [R; 4] {
    let (ax, ay, aw, ah) = anchor.center_form();
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    [
        ((b[0] + b[2]) * 0.5 - ax) / aw,
        ((b[1] + b[3]) * 0.5 - ay) / ah,
        (w / aw).ln(),
        (h / ah).ln(),
    ]
}

/// Decode deltas against `anchor` with the same clamp as
/// [`crate::boxgeom::decode_box`].
pub fn decode_generic<R: Real>(t: [R; 4], anchor: &BBox) -> [R; 4] {
    let (ax, ay, aw, ah) = anchor.center_form();
    let cx = t[0] * aw + ax;
    let cy = t[1] * ah + ay;
    let w = t[2].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp() * aw;
    let h = t[3].clamp(-DELTA_CLAMP, DELTA_CLAMP).exp() * ah;
    [cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5]
}

/// `IoU^eta * (1 - IoU + sum_i (t_i - t*_i)^2)` given both the boxes and
/// their encodings.
fn fiou_core<R: Real>(p: [R; 4], t: [R; 4], dp: [R; 4], dt: [f64; 4], eta: f64) -> R {
    let iou = overlap(p, t).iou;
    let mut sq = R::cst(0.0);
    for k in 0..4 {
        sq = sq + (dp[k] - dt[k]).square();
    }
    iou.powf(eta) * (-iou + 1.0 + sq)
}

/// FIoU on predicted boxes; both boxes are encoded against `anchor`.
pub fn fiou_boxes<R: Real>(pred: [R; 4], target: &BBox, anchor: &BBox, eta: f64) -> R {
    let t = target.to_array().map(R::cst);
    let dp = encode_generic(pred, anchor);
    let dt = encode_generic(target.to_array(), anchor);
    fiou_core(pred, t, dp, dt, eta)
}

/// FIoU on predicted deltas, as used in training: the IoU term is taken
/// between the decoded prediction and the target box.
pub fn fiou_deltas<R: Real>(deltas: [R; 4], target_delta: [f64; 4], target: &BBox, anchor: &BBox, eta: f64) -> R {
    let p = decode_generic(deltas, anchor);
    fiou_core(p, target.to_array().map(R::cst), deltas, target_delta, eta)
}

pub fn fiou_loss(pred: &BBox, target: &BBox, anchor: &BBox, eta: f64) -> Result<f64> {
    for b in [pred, target, anchor] {
        if b.width() <= 0.0 || b.height() <= 0.0 {
            return Err(Error::NonPositiveExtent);
        }
    }
    if !(eta >= 0.0) {
        return Err(Error::OutOfRange {
            name: "eta",
            value: eta,
            expected: ">= 0",
        });
    }
    Ok(fiou_boxes(pred.to_array(), target, anchor, eta))
}

/// Regression loss family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressionKind {
    L1,
    L2,
    SmoothL1,
    BalancedL1 { alpha: f64, gamma: f64 },
    Iou,
    Giou,
    Ciou,
    Eiou,
    FocalEiou { gamma: f64 },
}

impl RegressionKind {
    /// Delta-space kinds compare [`EncodedDelta`]s; the rest compare boxes.
    pub fn takes_deltas(&self) -> bool {
        matches!(self, Self::L1 | Self::L2 | Self::SmoothL1 | Self::BalancedL1 { .. })
    }

    /// Loss on raw 4-vectors: deltas or corner boxes per [`Self::takes_deltas`].
    pub fn eval<R: Real>(&self, p: [R; 4], t: [f64; 4]) -> R {
        let tr = t.map(R::cst);
        let per_coord = |f: &dyn Fn(R) -> R| (0..4).fold(R::cst(0.0), |acc, k| acc + f(p[k] - tr[k]));
        match *self {
            Self::L1 => per_coord(&l1),
            Self::L2 => per_coord(&l2),
            Self::SmoothL1 => per_coord(&smooth_l1),
            Self::BalancedL1 { alpha, gamma } => per_coord(&|e| balanced_l1(e, alpha, gamma)),
            Self::Iou => iou_loss(p, tr),
            Self::Giou => giou_loss(p, tr),
            Self::Ciou => ciou_loss(p, tr),
            Self::Eiou => eiou_loss(p, tr),
            Self::FocalEiou { gamma } => focal_eiou_loss(p, tr, gamma),
        }
    }
}

impl FromStr for RegressionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "l1" => Self::L1,
            "l2" => Self::L2,
            "smooth_l1" => Self::SmoothL1,
            "balanced_l1" => Self::BalancedL1 {
                alpha: 0.5,
                gamma: 1.5,
            },
            "iou" => Self::Iou,
            "giou" => Self::Giou,
            "ciou" => Self::Ciou,
            "eiou" => Self::Eiou,
            "focal_eiou" => Self::FocalEiou { gamma: 0.5 },
            _ => {
                return Err(Error::Unknown {
                    what: "regression loss",
                    name: s.to_string(),
                })
            }
        })
    }
}

/// Argument of [`reference_regression_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegressionInput {
    Delta(EncodedDelta),
    Box(BBox),
}

pub fn reference_regression_loss(kind: RegressionKind, prediction: RegressionInput, target: RegressionInput) -> Result<f64> {
    let (p, t) = match (kind.takes_deltas(), prediction, target) {
        (true, RegressionInput::Delta(p), RegressionInput::Delta(t)) => (p.to_array(), t.to_array()),
        (false, RegressionInput::Box(p), RegressionInput::Box(t)) => (p.to_array(), t.to_array()),
        _ => {
            return Err(Error::Invalid(format!(
                "{kind:?} expects {} inputs",
                if kind.takes_deltas() { "delta" } else { "box" }
            )))
        }
    };
    Ok(kind.eval(p, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// A reduced loss with its (weighted) per-sample terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub reduction: Reduction,
}

/// Reduce per-sample losses, multiplying by optional weights first. `Mean`
/// divides by the sample count, not by the weight sum.
pub fn reduce(per_sample: &[f64], weights: Option<&[f64]>, reduction: Reduction) -> Result<LossValue> {
    if let Some(w) = weights {
        if w.len() != per_sample.len() {
            return Err(Error::ShapeMismatch(vec![per_sample.len()], vec![w.len()]));
        }
    }
    let weighted: Vec<f64> = per_sample
        .iter()
        .enumerate()
        .map(|(i, &v)| v * weights.map_or(1.0, |w| w[i]))
        .collect();
    if let Some(i) = weighted.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite loss at sample {i}")));
    }
    let sum: f64 = weighted.iter().sum();
    let value = match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if weighted.is_empty() => 0.0,
        Reduction::Mean => sum / weighted.len() as f64,
    };
    Ok(LossValue {
        value,
        per_sample: weighted,
        reduction,
    })
}

/// Lower bound on the denominator of the relative error, so coordinates whose
/// true gradient is zero are judged by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: Vec<f64>,
    pub max_relative_error: f64,
}

/// Compare forward-mode derivatives of `loss` (row 0) against central
/// differences with step `epsilon`.
pub fn grad_check<const N: usize, L: SampleLoss<N>>(loss: &L, point: [f64; N], epsilon: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            expected: "[1e-7, 1e-4]",
        });
    }
    let (_, analytic) = value_and_grad(loss, 0, point);
    if let Some(k) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(k));
    }
    let mut numeric = vec![0.0; N];
    let mut relative_error = vec![0.0; N];
    for k in 0..N {
        let mut up = point;
        let mut down = point;
        up[k] += epsilon;
        down[k] -= epsilon;
        let n = (loss.eval::<f64>(0, up) - loss.eval::<f64>(0, down)) / (2.0 * epsilon);
        if !n.is_finite() {
            return Err(Error::NonFiniteGradient(k));
        }
        numeric[k] = n;
        let denom = analytic[k].abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
        relative_error[k] = (analytic[k] - n).abs() / denom;
    }
    let max_relative_error = relative_error.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        relative_error,
        max_relative_error,
    })
}

/// A [`RegressionKind`] against a fixed target, as a [`SampleLoss`].
pub struct RegressionSample {
    pub kind: RegressionKind,
    pub target: [f64; 4],
}

impl SampleLoss<4> for RegressionSample {
    fn eval<R: Real>(&self, _row: usize, x: [R; 4]) -> R {
        self.kind.eval(x, self.target)
    }
}

/// FIoU as a function of the predicted box corners.
pub struct FiouSample {
    pub target: BBox,
    pub anchor: BBox,
    pub eta: f64,
}

impl SampleLoss<4> for FiouSample {
    fn eval<R: Real>(&self, _row: usize, x: [R; 4]) -> R {
        fiou_boxes(x, &self.target, &self.anchor, self.eta)
    }
}

/// Focal loss as a function of the probability.
pub struct FocalSample {
    pub y: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl SampleLoss<1> for FocalSample {
    fn eval<R: Real>(&self, _row: usize, x: [R; 1]) -> R {
        focal(x[0], self.y, self.alpha, self.gamma)
    }
}
