use aqua_core::boxgeom::{encode_box, iou, BBox};
use aqua_core::losses::{
    bce, ciou_loss, eiou_loss, fiou_loss, focal, focal_eiou_loss, grad_check, iou_loss, reduce, FiouSample, FocalSample,
    Reduction, RegressionKind, RegressionSample,
};
use aqua_autodiff::{Real, SampleLoss};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut impl Rng) -> BBox {
    let x = rng.random_range(0.0..40.0);
    let y = rng.random_range(0.0..40.0);
    BBox::new(x, y, x + rng.random_range(4.0..30.0), y + rng.random_range(4.0..30.0)).unwrap()
}

/// A prediction overlapping `t` (jittered corners), so IoU-family losses are
/// away from their flat regions.
fn overlapping(rng: &mut impl Rng, t: &BBox) -> BBox {
    let (cx, cy, w, h) = t.center_form();
    BBox::from_center(
        cx + rng.random_range(-0.3..0.3) * w,
        cy + rng.random_range(-0.3..0.3) * h,
        w * rng.random_range(0.6..1.5),
        h * rng.random_range(0.6..1.5),
    )
}

const KINDS: [RegressionKind; 9] = [
    RegressionKind::L1,
    RegressionKind::L2,
    RegressionKind::SmoothL1,
    RegressionKind::BalancedL1 { alpha: 0.5, gamma: 1.5 },
    RegressionKind::Iou,
    RegressionKind::Giou,
    RegressionKind::Ciou,
    RegressionKind::Eiou,
    RegressionKind::FocalEiou { gamma: 0.5 },
];

fn aspect_term<R: Real>(p: [R; 4], t: [f64; 4]) -> R {
    let at = ((t[2] - t[0]) / (t[3] - t[1])).atan();
    let ap = ((p[2] - p[0]) / (p[3] - p[1])).atan();
    (ap - at).square() * (4.0 / (std::f64::consts::PI * std::f64::consts::PI))
}

/// CIoU with the trade-off coefficient frozen at a base point, which is the
/// function whose gradient the implementation reports there.
struct CiouFrozen {
    target: [f64; 4],
    alpha: f64,
}

impl CiouFrozen {
    fn at(p: [f64; 4], t: [f64; 4]) -> Self {
        let v = aspect_term(p, t);
        let denom = iou_loss(p, t) + v;
        Self { target: t, alpha: if denom > 0.0 { v / denom } else { 0.0 } }
    }
}

impl SampleLoss<4> for CiouFrozen {
    fn eval<R: Real>(&self, _row: usize, p: [R; 4]) -> R {
        let t = self.target;
        let here = Self::at(p.map(|x| x.value()), t).alpha;
        let v = aspect_term(p, t);
        ciou_loss(p, t.map(R::cst)) - v * here + v * self.alpha
    }
}

#[test]
fn every_regression_kind_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in KINDS {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (p, t) = if kind.takes_deltas() {
                let t: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let p: [f64; 4] = std::array::from_fn(|k| t[k] + rng.random_range(-2.0..2.0));
                (p, t)
            } else {
                let t = random_box(&mut rng);
                (overlapping(&mut rng, &t).to_array(), t.to_array())
            };
            let r = if kind == RegressionKind::Ciou {
                grad_check(&CiouFrozen::at(p, t), p, 1e-6).unwrap()
            } else {
                grad_check(&RegressionSample { kind, target: t }, p, 1e-6).unwrap()
            };
            worst = worst.max(r.max_relative_error);
            assert!(kind.eval(p, t) >= 0.0);
        }
        assert!(worst < 1e-3, "{kind:?}: {worst}");
    }
}

#[test]
fn fiou_passes_grad_check_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let target = random_box(&mut rng);
        let anchor = overlapping(&mut rng, &target);
        let pred = overlapping(&mut rng, &target);
        let eta = [0.0, 0.5, 1.0][i % 3];
        let r = grad_check(&FiouSample { target, anchor, eta }, pred.to_array(), 1e-6).unwrap();
        worst = worst.max(r.max_relative_error);
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn focal_grad_check_over_grid() {
    let mut worst: f64 = 0.0;
    for pi in 1..20 {
        let p = pi as f64 / 20.0;
        for gamma in [0.0, 0.5, 1.0, 2.0, 5.0] {
            for y in [0.0, 1.0] {
                let r = grad_check(&FocalSample { y, alpha: 0.25, gamma }, [p], 1e-6).unwrap();
                worst = worst.max(r.max_relative_error);
            }
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn focal_reduces_to_half_ce() {
    for i in 0..100 {
        let p = (i as f64 + 0.5) / 100.0;
        for y in [0.0, 1.0] {
            assert!((focal(p, y, 0.5, 0.0) - 0.5 * bce(p, y)).abs() < 1e-9);
        }
    }
}

#[test]
fn focal_decreasing_in_p_for_positives() {
    let mut prev = f64::INFINITY;
    for i in 1..100 {
        let v = focal(i as f64 / 100.0, 1.0, 0.25, 2.0);
        assert!(v < prev);
        prev = v;
    }
}

#[test]
fn fiou_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let target = random_box(&mut rng);
        let anchor = overlapping(&mut rng, &target);
        let pred = overlapping(&mut rng, &target);
        let dp = encode_box(&pred, &anchor).unwrap().to_array();
        let dt = encode_box(&target, &anchor).unwrap().to_array();
        let sq: f64 = dp.iter().zip(&dt).map(|(a, b)| (a - b).powi(2)).sum();
        let eta0 = fiou_loss(&pred, &target, &anchor, 0.0).unwrap();
        assert!((eta0 - (iou_loss(pred.to_array(), target.to_array()) + sq)).abs() < 1e-12);

        let far = pred.translate(500.0, 500.0);
        assert_eq!(iou(&far, &target), 0.0);
        for eta in [0.25, 0.5, 1.0, 2.0] {
            assert_eq!(fiou_loss(&far, &target, &anchor, eta).unwrap(), 0.0);
        }
    }
}

#[test]
fn focal_eiou_factorises() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let t = random_box(&mut rng);
        let p = overlapping(&mut rng, &t);
        let (p, t) = (p.to_array(), t.to_array());
        let i = 1.0 - iou_loss(p, t);
        for gamma in [0.0, 0.5, 1.0] {
            assert!((focal_eiou_loss(p, t, gamma) - i.powf(gamma) * eiou_loss(p, t)).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn losses_non_negative(
        p in 0.0..=1.0f64,
        y in prop::bool::ANY,
        alpha in 0.0..=1.0f64,
        gamma in 0.0..5.0f64,
        e in prop::array::uniform4(-5.0..5.0f64),
    ) {
        let y = if y { 1.0 } else { 0.0 };
        prop_assert!(bce(p, y) >= 0.0);
        prop_assert!(focal(p, y, alpha, gamma) >= 0.0);
        for kind in &KINDS[..4] {
            prop_assert!(kind.eval(e, [0.0; 4]) >= 0.0);
        }
    }

    #[test]
    fn mean_and_sum_reductions_agree(v in prop::collection::vec(0.0..10.0f64, 1..20)) {
        let s = reduce(&v, None, Reduction::Sum).unwrap().value;
        let m = reduce(&v, None, Reduction::Mean).unwrap().value;
        prop_assert!((s - m * v.len() as f64).abs() < 1e-9);
    }
}
