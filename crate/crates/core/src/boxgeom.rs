//! Axis-aligned boxes, IoU geometry, anchors, the delta encoding and NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to `tw`/`th` before exponentiation: `ln(1000 / 16)`.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356;

/// Rectangle in corner form (pixels, `x2 >= x1`, `y2 >= y1`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x2 >= x1 && y2 >= y1 {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Build from center form. Panics on negative extents in debug builds.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0);
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    /// `(cx, cy, w, h)`.
    pub fn center_form(&self) -> (f64, f64, f64, f64) {
        (
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.width(),
            self.height(),
        )
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    fn intersection(&self, o: &Self) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    fn enclosing(&self, o: &Self) -> Self {
        Self {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }
}

/// Intersection over union; 0 whenever the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || a.area() <= 0.0 || b.area() <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `(iou, |C \ (A u B)| / |C|)` where `C` is the smallest enclosing box.
pub fn giou_terms(a: &BBox, b: &BBox) -> (f64, f64) {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let c = a.enclosing(b).area();
    let penalty = if c > 0.0 { ((c - union) / c).max(0.0) } else { 0.0 };
    (iou(a, b), penalty)
}

/// Regression target relative to an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl EncodedDelta {
    pub const ZERO: Self = Self {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(t: [f64; 4]) -> Self {
        Self {
            tx: t[0],
            ty: t[1],
            tw: t[2],
            th: t[3],
        }
    }
}

pub fn encode_box(b: &BBox, anchor: &BBox) -> Result<EncodedDelta> {
    let (ax, ay, aw, ah) = anchor.center_form();
    let (x, y, w, h) = b.center_form();
    if aw <= 0.0 || ah <= 0.0 || w <= 0.0 || h <= 0.0 {
        return Err(Error::NonPositiveExtent);
    }
    Ok(EncodedDelta {
        tx: (x - ax) / aw,
        ty: (y - ay) / ah,
        tw: (w / aw).ln(),
        th: (h / ah).ln(),
    })
}

pub fn decode_box(t: &EncodedDelta, anchor: &BBox) -> BBox {
    let (ax, ay, aw, ah) = anchor.center_form();
    let tw = t.tw.clamp(-DELTA_CLAMP, DELTA_CLAMP);
    let th = t.th.clamp(-DELTA_CLAMP, DELTA_CLAMP);
    BBox::from_center(ax + t.tx * aw, ay + t.ty * ah, aw * tw.exp(), ah * th.exp())
}

/// Width:height ratios of the three anchor shapes.
pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];

/// Octave scale multipliers `2^0, 2^(1/3), 2^(2/3)`.
pub fn scale_multipliers() -> [f64; 3] {
    [1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)]
}

pub const ANCHORS_PER_CELL: usize = 9;

/// Dense anchors for one pyramid level.
///
/// Anchor `a` of cell `(y, x)` is stored at `(y * width + x) * 9 + a`, with
/// `a = ratio_index * 3 + scale_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub level_stride: f64,
    pub height: usize,
    pub width: usize,
    pub base_scale: f64,
    pub anchors: Vec<BBox>,
}

/// Anchors of side `base_scale * stride * s` for each scale multiplier `s`,
/// reshaped to each aspect ratio at constant area, centred on cell centres.
pub fn generate_anchors(feature_height: usize, feature_width: usize, stride: f64, base_scale: f64) -> AnchorGrid {
    let scales = scale_multipliers();
    let mut anchors = Vec::with_capacity(feature_height * feature_width * ANCHORS_PER_CELL);
    for y in 0..feature_height {
        for x in 0..feature_width {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for r in ASPECT_RATIOS {
                for s in scales {
                    let side = base_scale * stride * s;
                    let w = side * r.sqrt();
                    let h = side / r.sqrt();
                    anchors.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    AnchorGrid {
        level_stride: stride,
        height: feature_height,
        width: feature_width,
        base_scale,
        anchors,
    }
}

/// Indices surviving greedy non-maximum suppression, in output order.
///
/// Order is descending score, ties broken by ascending `(x1, y1, x2, y2)` and
/// finally by input index.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then_with(|| {
                let (a, b) = (boxes[i].to_array(), boxes[j].to_array());
                a.iter()
                    .zip(&b)
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(i.cmp(&j))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.0).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}
