//! Procedural scenes of four shape classes on a textured background.
//!
//! Later objects are drawn over earlier ones. Boxes are the tight extent of
//! the pixels where an object is visible, so they shrink under occlusion.

use std::f64::consts::PI;

use aqua_core::{BBox, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

pub const CLASS_NAMES: [&str; 4] = ["disk", "ellipse", "star", "rectangle"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Smallest share of an object's pixels that must stay visible after later
/// objects are drawn over it.
pub const MIN_VISIBLE_FRACTION: f64 = 0.5;

const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Ellipse,
    Star,
    Rectangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Disk, Self::Ellipse, Self::Star, Self::Rectangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.class_id()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent (diameter of the bounding circle) in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Chance that an object may be placed over earlier ones.
    pub occlusion_prob: f64,
    /// Range of the luminance gap between an object and the background.
    pub contrast: [f64; 2],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 14.0,
            max_size: 26.0,
            occlusion_prob: 0.2,
            contrast: [0.3, 0.6],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.width < 8 || self.height < 8 || self.width > 4096 || self.height > 4096 {
            return bad(format!("canvas {}x{} outside 8..=4096", self.width, self.height));
        }
        if self.min_objects > self.max_objects || self.max_objects > 64 {
            return bad(format!("object count range {}..={}", self.min_objects, self.max_objects));
        }
        let side = self.width.min(self.height) as f64;
        if !(self.min_size >= 3.0 && self.min_size <= self.max_size && self.max_size <= side) {
            return bad(format!("size range {}..{} for a {side}px canvas", self.min_size, self.max_size));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad(format!("occlusion_prob {}", self.occlusion_prob));
        }
        let [lo, hi] = self.contrast;
        if !(0.0 < lo && lo <= hi && hi <= 0.9) {
            return bad(format!("contrast range [{lo}, {hi}]"));
        }
        Ok(())
    }
}

/// Geometry of one rendered object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Diameter of the bounding circle.
    pub size: f64,
    /// Long-to-short side ratio (ellipse, rectangle).
    pub aspect: f64,
    pub rotation: f64,
}

impl Shape {
    pub fn radius(&self) -> f64 {
        self.size / 2.0
    }

    /// Radius of a circle around the centre that contains the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Rectangle => 0.5 * self.size * (1.0 + self.aspect.powi(-2)).sqrt(),
            _ => self.radius(),
        }
    }

    /// Whether the point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius();
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Ellipse => {
                let (s, c) = self.rotation.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let b = r / self.aspect;
                (u / r).powi(2) + (v / b).powi(2) <= 1.0
            }
            ShapeKind::Star => point_in_polygon(dx, dy, &star_vertices(r, self.rotation)),
            ShapeKind::Rectangle => {
                // axis aligned with `size` as the long side; rotation only
                // picks the orientation
                let (long, short) = (r, r / self.aspect);
                let (hw, hh) = if self.rotation < PI / 2.0 { (long, short) } else { (short, long) };
                dx.abs() <= hw && dy.abs() <= hh
            }
        }
    }
}

fn star_vertices(r: f64, rotation: f64) -> [(f64, f64); 10] {
    std::array::from_fn(|i| {
        let rad = if i % 2 == 0 { r } else { 0.45 * r };
        let a = rotation + i as f64 * PI / 5.0 - PI / 2.0;
        (rad * a.cos(), rad * a.sin())
    })
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    /// Tight box around the visible pixels, in pixel-edge coordinates.
    pub bbox: BBox,
    pub visible_fraction: f64,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
}

/// Pixels covered by `shape`, sampled at pixel centres.
fn coverage(shape: &Shape, width: usize, height: usize) -> Vec<usize> {
    let r = shape.bounding_radius() + 1.0;
    let x0 = (shape.cx - r).floor().max(0.0) as usize;
    let y0 = (shape.cy - r).floor().max(0.0) as usize;
    let x1 = ((shape.cx + r).ceil().max(0.0) as usize).min(width);
    let y1 = ((shape.cy + r).ceil().max(0.0) as usize).min(height);
    let mut px = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                px.push(y * width + x);
            }
        }
    }
    px
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Render a scene. Deterministic in `(spec, seed)`; `spec.seed` is ignored.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);

    // background: tinted vertical gradient with mild pixel noise
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.7));
    let slope = rng.random_range(-0.15..0.15);
    let mut image = Image::from_fn(w, h, |_, y| {
        let t = y as f64 / (h - 1) as f64 - 0.5;
        base.map(|b| b + slope * t)
    });
    let bg_lum = luminance(base);

    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    let mut full_area: Vec<usize> = Vec::new();
    let mut shapes: Vec<Shape> = Vec::new();
    let mut colours: Vec<[f64; 3]> = Vec::new();

    for _ in 0..n {
        let kind = ShapeKind::ALL[rng.random_range(0..NUM_CLASSES)];
        let may_overlap = rng.random_bool(spec.occlusion_prob);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = rng.random_range(spec.min_size..=spec.max_size);
            let margin = 0.4 * size;
            let shape = Shape {
                kind,
                cx: rng.random_range(margin..=(w as f64 - margin)),
                cy: rng.random_range(margin..=(h as f64 - margin)),
                size,
                aspect: match kind {
                    ShapeKind::Ellipse => rng.random_range(1.8..2.6),
                    ShapeKind::Rectangle => rng.random_range(1.0..1.8),
                    _ => 1.0,
                },
                rotation: rng.random_range(0.0..PI),
            };
            let px = coverage(&shape, w, h);
            if px.len() < 9 {
                continue;
            }
            let ok = if may_overlap {
                // every earlier object must stay mostly visible
                let mut lost = vec![0usize; shapes.len()];
                for &p in &px {
                    if let Some(o) = owner[p] {
                        lost[o] += 1;
                    }
                }
                (0..shapes.len()).all(|o| {
                    let vis = owner.iter().filter(|x| **x == Some(o)).count() - lost[o];
                    vis as f64 >= MIN_VISIBLE_FRACTION * full_area[o] as f64
                })
            } else {
                shapes
                    .iter()
                    .all(|s| (s.cx - shape.cx).hypot(s.cy - shape.cy) > s.bounding_radius() + shape.bounding_radius() + 1.0)
            };
            if ok {
                placed = Some((shape, px));
                break;
            }
        }
        let Some((shape, px)) = placed else { continue };
        let idx = shapes.len();
        for &p in &px {
            owner[p] = Some(idx);
        }
        full_area.push(px.len());
        shapes.push(shape);

        let gap = rng.random_range(spec.contrast[0]..=spec.contrast[1]);
        let sign = if bg_lum + gap > 0.95 {
            -1.0
        } else if bg_lum - gap < 0.05 {
            1.0
        } else if rng.random_bool(0.5) {
            1.0
        } else {
            -1.0
        };
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.4));
        let tl = luminance(tint);
        colours.push(std::array::from_fn(|c| base[c] + sign * gap * tint[c] / tl));
    }

    let noise = rng.random_range(0.01..0.03);
    let mut objects = Vec::new();
    for (i, shape) in shapes.iter().enumerate() {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut vis = 0usize;
        for (p, o) in owner.iter().enumerate() {
            if *o == Some(i) {
                let (x, y) = (p % w, p / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                vis += 1;
            }
        }
        if vis == 0 {
            continue;
        }
        objects.push(SceneObject {
            class_id: shape.kind.class_id(),
            bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?,
            visible_fraction: vis as f64 / full_area[i] as f64,
            shape: *shape,
        });
    }
    for y in 0..h {
        for x in 0..w {
            let mut px = match owner[y * w + x] {
                Some(o) => colours[o],
                None => image.pixel(x, y),
            };
            for v in px.iter_mut() {
                *v += noise * (rng.random::<f64>() - 0.5) * 2.0;
            }
            image.set_pixel(x, y, px);
        }
    }
    Ok(Scene {
        image: image.clamp01(),
        objects,
    })
}
