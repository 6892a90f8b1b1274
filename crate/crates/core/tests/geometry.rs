use aqua_core::boxgeom::{decode_box, encode_box, generate_anchors, giou_terms, iou, nms, BBox};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of cell centres `(k + 0.5) * cell` inside `[lo, hi)`.
fn centres_inside(lo: f64, hi: f64, cell: f64) -> f64 {
    let first = (lo / cell - 0.5).ceil().max(0.0);
    let last = (hi / cell - 0.5).ceil();
    (last - first).max(0.0)
}

/// Area by counting the cells of an `n x n` raster (separable, so cheap at any n) over `[0, extent]^2`.
fn raster_area(b: &BBox, extent: f64, n: usize) -> f64 {
    let cell = extent / n as f64;
    centres_inside(b.x1, b.x2, cell) * centres_inside(b.y1, b.y2, cell)
}

fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let (extent, n) = (100.0, 100_000);
    let inter = BBox {
        x1: a.x1.max(b.x1),
        y1: a.y1.max(b.y1),
        x2: a.x2.min(b.x2).max(a.x1.max(b.x1)),
        y2: a.y2.min(b.y2).max(a.y1.max(b.y1)),
    };
    let i = raster_area(&inter, extent, n);
    let u = raster_area(a, extent, n) + raster_area(b, extent, n) - i;
    if u == 0.0 {
        0.0
    } else {
        i / u
    }
}

fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    random_box_min(rng, extent, 1.0)
}

fn random_box_min(rng: &mut impl Rng, extent: f64, min_side: f64) -> BBox {
    let x1 = rng.random_range(0.0..extent * 0.8);
    let y1 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(min_side..extent * 0.4);
    let h = rng.random_range(min_side..extent * 0.4);
    BBox::new(x1, y1, (x1 + w).min(extent), (y1 + h).min(extent)).unwrap()
}

#[test]
fn iou_matches_rasterisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_box_min(&mut rng, 100.0, 5.0);
        let b = if rng.random_bool(0.5) {
            let (cx, cy, w, h) = a.center_form();
            BBox::from_center(cx + rng.random_range(-5.0..5.0), cy + rng.random_range(-5.0..5.0), w, h).clip(100.0, 100.0)
        } else {
            random_box_min(&mut rng, 100.0, 5.0)
        };
        worst = worst.max((iou(&a, &b) - raster_iou(&a, &b)).abs());
    }
    assert!(worst <= 1e-3, "worst deviation {worst}");
}

#[test]
fn giou_example_against_raster() {
    let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let b = BBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
    let (i, p) = giou_terms(&a, &b);
    // C = (0,0,2,2): 4 raster units, union 2
    let c = raster_area(&BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), 2.0, 200);
    let u = raster_area(&a, 2.0, 200) + raster_area(&b, 2.0, 200);
    assert_eq!(i, 0.0);
    assert!((p - (c - u) / c).abs() < 1e-12);
    assert!((i - p + 0.5).abs() < 1e-12);
}

/// Remove-based greedy suppression: repeatedly take the best remaining box
/// and drop everything it overlaps.
fn nms_oracle(dets: &[(BBox, f64)], thr: f64) -> Vec<(BBox, f64)> {
    let mut remaining: Vec<(BBox, f64)> = dets.to_vec();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (a, b) = (&remaining[i], &remaining[best]);
            let key = |d: &(BBox, f64)| (d.1, -d.0.x1, -d.0.y1, -d.0.x2, -d.0.y2);
            if key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater) {
                best = i;
            }
        }
        let keep = remaining.remove(best);
        remaining.retain(|d| iou(&d.0, &keep.0) <= thr);
        out.push(keep);
    }
    out
}

#[test]
fn nms_matches_reference_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(0..40);
        let dets: Vec<(BBox, f64)> = (0..n)
            .map(|_| (random_box(&mut rng, 50.0), (rng.random_range(0..20) as f64) / 20.0))
            .collect();
        let thr = rng.random_range(0.1..0.9);
        assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
    }
}

#[test]
fn nms_three_box_case() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let b = BBox::new(1.0, 0.0, 11.0, 10.0).unwrap(); // iou(a,b) = 9/11
    let c = BBox::new(6.0, 0.0, 16.0, 10.0).unwrap(); // iou(a,c) = 4/16, iou(b,c) = 1/3
    let dets = [(a, 0.9), (b, 0.8), (c, 0.7)];
    assert_eq!(nms(&dets, 0.5), vec![(a, 0.9), (c, 0.7)]);
    assert_eq!(nms(&dets, 0.3), vec![(a, 0.9), (c, 0.7)]);
    assert_eq!(nms(&dets, 0.2), vec![(a, 0.9)]);
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0i32..200, 0i32..200, 1i32..100, 1i32..100)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap())
}

fn arb_real_box() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn iou_symmetric_and_bounded(a in arb_real_box(), b in arb_real_box()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -100i32..100, dy in -100i32..100) {
        let (dx, dy) = (dx as f64, dy as f64);
        prop_assert_eq!(iou(&a.translate(dx, dy), &b.translate(dx, dy)), iou(&a, &b));
    }

    #[test]
    fn giou_bounded_by_iou(a in arb_real_box(), b in arb_real_box()) {
        let (i, p) = giou_terms(&a, &b);
        prop_assert!((0.0..1.0).contains(&p), "{p}");
        prop_assert!(i - p <= i);
        prop_assert!(i - p > -1.0);
    }

    #[test]
    fn giou_equals_iou_under_containment(a in arb_real_box(), f in 0.0..1.0f64, g in 0.0..1.0f64, s in 0.1..1.0f64) {
        let (cx, cy, w, h) = a.center_form();
        let iw = w * s;
        let ih = h * s;
        let inner = BBox::from_center(
            cx + (f - 0.5) * (w - iw),
            cy + (g - 0.5) * (h - ih),
            iw,
            ih,
        );
        let (_, p) = giou_terms(&a, &inner);
        prop_assert!(p.abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip(b in arb_real_box(), a in arb_real_box()) {
        let t = encode_box(&b, &a).unwrap();
        prop_assume!(t.tw.abs() < 4.0 && t.th.abs() < 4.0);
        let d = decode_box(&t, &a);
        for (p, q) in d.to_array().iter().zip(b.to_array()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn anchor_count(h in 1usize..12, w in 1usize..12, stride in 1.0..32.0f64) {
        let g = generate_anchors(h, w, stride, 4.0);
        prop_assert_eq!(g.anchors.len(), h * w * 9);
    }
}

#[test]
fn round_trip_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        // side ratios stay well inside the decode clamp
        let a = random_box_min(&mut rng, 200.0, 5.0);
        let b = random_box_min(&mut rng, 200.0, 5.0);
        let d = decode_box(&encode_box(&b, &a).unwrap(), &a);
        for (p, q) in d.to_array().iter().zip(b.to_array()) {
            worst = worst.max((p - q).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");
}
