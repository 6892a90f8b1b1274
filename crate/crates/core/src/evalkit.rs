//! Detection metrics, corruption sweeps and feature diagnostics.

use std::collections::HashMap;
use std::fmt;

use aqua_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::watermodel::{corrupt_image, gram_distance, gram_matrix, CorruptionKind, FeatureExtractor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    TruePositive,
    FalsePositive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Index into the detection list.
    pub detection: usize,
    /// Index into the ground-truth list.
    pub gt: Option<usize>,
    pub verdict: Verdict,
    pub iou: f64,
    pub class_id: usize,
    pub score: f64,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.verdict == Verdict::TruePositive
    }
}

/// Descending score, ties by ascending index.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching in descending score order. Each detection takes the
/// unmatched ground truth of its image and class with the highest IoU (ties:
/// lowest index) and is a true positive iff that IoU reaches the threshold.
/// Returns the records in processing order and the number of unmatched GTs.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> (Vec<MatchRecord>, usize) {
    let mut by_key: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id, g.class_id)).or_default().push(j);
    }
    let mut matched = vec![false; gts.len()];
    let mut records = Vec::with_capacity(dets.len());
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for &j in by_key.get(&(d.image_id, d.class_id)).map_or(&[][..], Vec::as_slice) {
            if matched[j] {
                continue;
            }
            let v = iou(&d.bbox, &gts[j].bbox);
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, j));
            }
        }
        let (v, gt) = match best {
            Some((v, j)) if v >= iou_threshold => {
                matched[j] = true;
                (v, Some(j))
            }
            Some((v, _)) => (v, None),
            None => (0.0, None),
        };
        records.push(MatchRecord {
            detection: i,
            gt,
            verdict: if gt.is_some() {
                Verdict::TruePositive
            } else {
                Verdict::FalsePositive
            },
            iou: v,
            class_id: d.class_id,
            score: d.score,
        });
    }
    let fn_count = matched.iter().filter(|m| !**m).count();
    (records, fn_count)
}

/// `(precision, recall)`. With no detections precision is 1; with no ground
/// truth recall is 1.
pub fn precision_recall(records: &[MatchRecord], total_gt: usize) -> (f64, f64) {
    let tp = records.iter().filter(|r| r.is_tp()).count() as f64;
    let p = if records.is_empty() { 1.0 } else { tp / records.len() as f64 };
    let r = if total_gt == 0 { 1.0 } else { tp / total_gt as f64 };
    (p, r)
}

/// Recall thresholds `0, 0.01, ..., 1`.
pub fn recall_thresholds() -> impl Iterator<Item = f64> {
    (0..=100).map(|t| t as f64 / 100.0)
}

/// 101-point interpolated AP; `None` when there is no ground truth.
pub fn average_precision(records: &[MatchRecord], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let order = score_order(records.iter().map(|r| r.score));
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (n, &i) in order.iter().enumerate() {
        if records[i].is_tp() {
            tp += 1;
        }
        precision.push(tp as f64 / (n + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in recall_thresholds() {
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// Unweighted mean over classes that have ground truth.
pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class AP at one IoU threshold.
pub fn per_class_ap(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_threshold: f64) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            let (records, _) = match_detections(&d, &g, iou_threshold);
            average_precision(&records, g.len())
        })
        .collect()
}

pub const COCO_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// mAP averaged over IoU thresholds 0.50:0.05:0.95.
pub fn coco_ap(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> Option<f64> {
    let maps: Option<Vec<f64>> = COCO_THRESHOLDS
        .iter()
        .map(|&t| mean_ap(&per_class_ap(dets, gts, num_classes, t)))
        .collect();
    maps.map(|m| m.iter().sum::<f64>() / m.len() as f64)
}

/// Metrics for one evaluated split. `map50` is VOC-style mAP at IoU 0.5 and
/// `coco_ap` the 0.50:0.95 average; both use 101-point interpolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap50: Vec<Option<f64>>,
    pub map50: Option<f64>,
    pub coco_ap: Option<f64>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
}

pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, num_images: usize) -> EvalReport {
    let per_class_ap50 = per_class_ap(dets, gts, num_classes, 0.5);
    EvalReport {
        map50: mean_ap(&per_class_ap50),
        coco_ap: coco_ap(dets, gts, num_classes),
        per_class_ap50,
        num_images,
        num_gt: gts.len(),
        num_detections: dets.len(),
    }
}

/// Which AP a sweep reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMetric {
    Map50,
    CocoAp,
}

impl ApMetric {
    pub fn pick(&self, r: &EvalReport) -> f64 {
        match self {
            Self::Map50 => r.map50,
            Self::CocoAp => r.coco_ap,
        }
        .unwrap_or(0.0)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Map50 => "mAP50",
            Self::CocoAp => "COCO AP",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: CorruptionKind,
    pub severity: usize,
    pub ap: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub metric: ApMetric,
    pub clean_ap: f64,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessTable {
    /// `(mean AP, mean delta)` over the corrupted rows. Severity-0 rows only
    /// count when nothing else was swept.
    pub fn average(&self) -> (f64, f64) {
        let corrupted: Vec<&RobustnessRow> = self.rows.iter().filter(|r| r.severity > 0).collect();
        let rows = if corrupted.is_empty() { self.rows.iter().collect() } else { corrupted };
        if rows.is_empty() {
            return (self.clean_ap, 0.0);
        }
        let n = rows.len() as f64;
        (
            rows.iter().map(|r| r.ap).sum::<f64>() / n,
            rows.iter().map(|r| r.delta).sum::<f64>() / n,
        )
    }
}

impl fmt::Display for RobustnessTable {
    /// Percent values, deltas in parentheses, with a trailing average row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{}", "corruption", self.metric.label())?;
        writeln!(f, "{:<24}{:.1}", "No Corruption", 100.0 * self.clean_ap)?;
        for r in &self.rows {
            let name = format!("{} s{}", title_case(r.kind.name()), r.severity);
            writeln!(f, "{:<24}{:.1} ({:+.1})", name, 100.0 * r.ap, 100.0 * r.delta)?;
        }
        let (ap, delta) = self.average();
        writeln!(f, "{:<24}{:.1} ({:+.1})", "Average", 100.0 * ap, 100.0 * delta)
    }
}

fn title_case(s: &str) -> String {
    s.split('_')
        .map(|w| {
            let mut c = w.chars();
            c.next().map_or(String::new(), |h| h.to_uppercase().collect::<String>() + c.as_str())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// An evaluation image with its annotations as `(box, class)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub image: Image,
    pub objects: Vec<(BBox, usize)>,
}

/// Detections as `(box, class, score)` triples.
pub type RawDetections = Vec<(BBox, usize, f64)>;

/// Run `detect` on every sample and score the result.
pub fn evaluate_model(
    detect: &mut dyn FnMut(&Image) -> RawDetections,
    samples: &[EvalSample],
    num_classes: usize,
    transform: &dyn Fn(usize, &Image) -> Image,
) -> EvalReport {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let img = transform(i, &s.image);
        for (bbox, class_id, score) in detect(&img) {
            dets.push(Detection {
                image_id: i,
                class_id,
                bbox,
                score,
            });
        }
        for &(bbox, class_id) in &s.objects {
            gts.push(GroundTruth {
                image_id: i,
                class_id,
                bbox,
            });
        }
    }
    evaluate(&dets, &gts, num_classes, samples.len())
}

/// Seed for the corruption of sample `index` under `seed`.
pub fn corruption_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluate clean and corrupted copies of `samples`.
pub fn robustness_sweep(
    detect: &mut dyn FnMut(&Image) -> RawDetections,
    samples: &[EvalSample],
    num_classes: usize,
    kinds: &[CorruptionKind],
    severities: &[usize],
    seed: u64,
    metric: ApMetric,
) -> Result<RobustnessTable> {
    if let Some(&s) = severities.iter().find(|&&s| s > 5) {
        return Err(Error::OutOfRange {
            name: "severity",
            value: s as f64,
            expected: "0..=5",
        });
    }
    let clean = evaluate_model(detect, samples, num_classes, &|_, img| img.clone());
    let clean_ap = metric.pick(&clean);
    let mut rows = Vec::new();
    for &kind in kinds {
        for &severity in severities {
            let report = if severity == 0 {
                clean.clone()
            } else {
                evaluate_model(detect, samples, num_classes, &|i, img| {
                    corrupt_image(img, kind, severity, corruption_seed(seed, i)).expect("severity checked")
                })
            };
            let ap = metric.pick(&report);
            rows.push(RobustnessRow {
                kind,
                severity,
                ap,
                delta: ap - clean_ap,
            });
        }
    }
    Ok(RobustnessTable { metric, clean_ap, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStatRow {
    pub layer: usize,
    pub domain: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpread {
    pub layer: usize,
    /// Population std across domains of the per-domain activation mean.
    pub mean_std: f64,
    /// Population std across domains of the per-domain activation std.
    pub std_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStatsTable {
    pub rows: Vec<FeatureStatRow>,
    pub cross_domain: Vec<LayerSpread>,
}

fn population_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Activation statistics of `layers` (indices into the probe's output) per
/// domain, pooled over every activation of every image.
pub fn feature_stats(
    probe: &dyn Fn(&Image) -> Vec<Tensor>,
    domains: &[(usize, Vec<Image>)],
    layers: std::ops::Range<usize>,
) -> Result<FeatureStatsTable> {
    if domains.len() < 2 {
        return Err(Error::Invalid("feature statistics need at least two domains".into()));
    }
    let mut rows = Vec::new();
    for (domain, images) in domains {
        let mut sums = vec![(0.0, 0.0, 0usize); layers.len()];
        for img in images {
            let feats = probe(img);
            for (slot, l) in layers.clone().enumerate() {
                let f = feats
                    .get(l)
                    .ok_or_else(|| Error::Invalid(format!("probe produced no layer {l}")))?;
                let s = &mut sums[slot];
                s.0 += f.sum();
                s.1 += f.sq_norm();
                s.2 += f.numel();
            }
        }
        for (slot, l) in layers.clone().enumerate() {
            let (s, sq, n) = sums[slot];
            let n = n.max(1) as f64;
            let mean = s / n;
            rows.push(FeatureStatRow {
                layer: l,
                domain: *domain,
                mean,
                std: (sq / n - mean * mean).max(0.0).sqrt(),
            });
        }
    }
    let cross_domain = layers
        .map(|l| {
            let means: Vec<f64> = rows.iter().filter(|r| r.layer == l).map(|r| r.mean).collect();
            let stds: Vec<f64> = rows.iter().filter(|r| r.layer == l).map(|r| r.std).collect();
            LayerSpread {
                layer: l,
                mean_std: population_std(&means),
                std_std: population_std(&stds),
            }
        })
        .collect();
    Ok(FeatureStatsTable { rows, cross_domain })
}

/// Symmetric style-distance matrix between domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMatrix {
    pub domains: Vec<usize>,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
}

impl StyleMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.domains.len() + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let n = self.domains.len();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j)).sum()).collect()
    }

    /// Pearson correlation between the off-diagonal upper triangle and the
    /// same entries of `other` (row-major `n x n`).
    pub fn correlate(&self, other: &[f64]) -> Option<f64> {
        let n = self.domains.len();
        if other.len() != n * n {
            return None;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                a.push(self.get(i, j));
                b.push(other[i * n + j]);
            }
        }
        pearson(&a, &b)
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Distances between domain-averaged Gram matrices, summed over extractor
/// layers.
pub fn style_distance_matrix(domains: &[(usize, Vec<Image>)], extractor: &dyn FeatureExtractor) -> Result<StyleMatrix> {
    if domains.len() < 2 {
        return Err(Error::Invalid("style distances need at least two domains".into()));
    }
    let mut grams: Vec<Vec<Vec<f64>>> = Vec::new();
    for (id, images) in domains {
        if images.len() < 2 {
            return Err(Error::Invalid(format!("domain {id} has fewer than 2 samples")));
        }
        let mut avg: Vec<Vec<f64>> = Vec::new();
        for img in images {
            for (l, f) in extractor.features(img).iter().enumerate() {
                let g = gram_matrix(f);
                if avg.len() <= l {
                    avg.push(vec![0.0; g.len()]);
                }
                avg[l].iter_mut().zip(&g).for_each(|(a, v)| *a += v / images.len() as f64);
            }
        }
        grams.push(avg);
    }
    let n = domains.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = grams[i].iter().zip(&grams[j]).map(|(a, b)| gram_distance(a, b)).sum();
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(StyleMatrix {
        domains: domains.iter().map(|d| d.0).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection {
            image_id: 0,
            class_id: 0,
            bbox,
            score,
        }
    }

    fn gt(bbox: BBox) -> GroundTruth {
        GroundTruth {
            image_id: 0,
            class_id: 0,
            bbox,
        }
    }

    #[test]
    fn single_match_rule() {
        let g = b(0., 0., 10., 10.);
        let (r, fns) = match_detections(&[det(g, 0.9)], &[gt(g)], 0.5);
        assert!(r[0].is_tp() && fns == 0);
        let (r, _) = match_detections(&[det(g, 0.8), det(b(0., 0., 10., 9.), 0.9)], &[gt(g)], 0.5);
        assert_eq!(r[0].detection, 1);
        assert!(r[0].is_tp() && !r[1].is_tp());
    }

    #[test]
    fn precision_recall_examples() {
        let mk = |tp: bool| MatchRecord {
            detection: 0,
            gt: None,
            verdict: if tp {
                Verdict::TruePositive
            } else {
                Verdict::FalsePositive
            },
            iou: 0.0,
            class_id: 0,
            score: 0.5,
        };
        let mut recs: Vec<MatchRecord> = (0..8).map(|_| mk(true)).collect();
        recs.extend((0..2).map(|_| mk(false)));
        assert_eq!(precision_recall(&recs, 8), (0.8, 1.0));
        assert_eq!(precision_recall(&[], 3), (1.0, 0.0));
    }

    #[test]
    fn ap_examples() {
        let g = b(0., 0., 10., 10.);
        let (r, _) = match_detections(&[det(g, 0.9)], &[gt(g)], 0.5);
        assert_eq!(average_precision(&r, 1), Some(1.0));
        assert_eq!(average_precision(&[], 2), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(mean_ap(&[Some(1.0), Some(0.5), None]), Some(0.75));
        assert_eq!(coco_ap(&[det(g, 0.9)], &[gt(g)], 1), Some(1.0));
    }

    #[test]
    fn table_layout() {
        let t = RobustnessTable {
            metric: ApMetric::CocoAp,
            clean_ap: 0.482,
            rows: vec![RobustnessRow {
                kind: CorruptionKind::GaussianNoise,
                severity: 3,
                ap: 0.172,
                delta: -0.31,
            }],
        };
        let s = t.to_string();
        assert!(s.contains("No Corruption           48.2"));
        assert!(s.contains("Gaussian Noise s3       17.2 (-31.0)"));
        assert!(s.lines().last().unwrap().starts_with("Average"));
    }

    #[test]
    fn pearson_basic() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }
}
