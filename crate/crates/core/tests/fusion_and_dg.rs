use aqua_autodiff::testing::numeric_grad;
use aqua_autodiff::{sigmoid, Tape, Tensor};
use aqua_core::dginvariance::{
    channel_mean_variance, domain_adversarial_loss_var, domain_mixup, irm_penalty, irm_penalty_numeric, k_maxpooling,
    sample_mix_ratios, sc_loss, ssc_loss, ssmc_loss, ssmc_loss_var, DomainClassifier, FeaturePair, IrmTerm, LogitBce,
    MixPlan, ScaledSampleTerm, SquaredDelta,
};
use aqua_core::probfusion::{boosting_weight, marginal_score, objectness_prior};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> impl Iterator<Item = f64> {
    (0..=20).map(|i| i as f64 / 20.0)
}

#[test]
fn prior_squared_is_product() {
    for o in grid() {
        for q in grid() {
            assert!((objectness_prior(o, q).powi(2) - o * q).abs() < 1e-9);
        }
    }
}

#[test]
fn argmax_invariant_to_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let cls: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |m, i| if v[i] > v[m] { i } else { m });
        for prior in grid().skip(1) {
            assert_eq!(argmax(&marginal_score(prior, &cls)), argmax(&cls));
        }
    }
}

#[test]
fn boosting_weights_on_grid() {
    for p in grid() {
        for fg in [true, false] {
            assert_eq!(boosting_weight(p, fg, 0.0), 1.0);
            for gamma in [0.5, 1.0, 2.0, 3.0] {
                let w = boosting_weight(p, fg, gamma);
                assert!((0.0..=1.0).contains(&w));
                let expect = if fg { (1.0 - p).powf(gamma) } else { p.powf(gamma) };
                assert!((w - expect).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #[test]
    fn final_score_composition(o in 0.0..=1.0f64, q in 0.0..=1.0f64, c in 0.0..=1.0f64) {
        let s = marginal_score(objectness_prior(o, q), &[c])[0];
        prop_assert!((s - (o * q).powf(0.25) * c.sqrt()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn prior_monotone(o in 0.0..0.99f64, q in 0.01..=1.0f64, d in 0.001..0.01f64) {
        prop_assert!(objectness_prior(o + d, q) > objectness_prior(o, q));
    }

    #[test]
    fn foreground_weight_decreasing_in_prior(p in 0.0..0.99f64, d in 0.001..0.01f64, gamma in 0.1..4.0f64) {
        prop_assert!(boosting_weight(p + d, true, gamma) < boosting_weight(p, true, gamma));
        prop_assert!(boosting_weight(p + d, false, gamma) > boosting_weight(p, false, gamma));
    }

    #[test]
    fn mixup_is_on_segment(
        a in prop::collection::vec(-5.0..5.0f64, 12),
        b in prop::collection::vec(-5.0..5.0f64, 12),
        lambda in 0.0..=1.0f64,
    ) {
        let pair = FeaturePair::new(Tensor::new(&[3, 2, 2], a.clone()), Tensor::new(&[3, 2, 2], b.clone()), 0, 1).unwrap();
        let m = domain_mixup(&pair, lambda).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(m.data()) {
            prop_assert!(x.min(*y) - 1e-12 <= *z && *z <= x.max(*y) + 1e-12);
        }
    }
}

#[test]
fn mixup_endpoints_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Tensor::from_fn(&[4, 3, 3], |_| rng.random_range(-3.0..3.0));
    let b = Tensor::from_fn(&[4, 3, 3], |_| rng.random_range(-3.0..3.0));
    let pair = FeaturePair::new(a.clone(), b.clone(), 0, 1).unwrap();
    assert_eq!(domain_mixup(&pair, 1.0).unwrap(), a);
    assert_eq!(domain_mixup(&pair, 0.0).unwrap(), b);
}

#[test]
fn mix_ratio_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for alpha in [0.1, 1.0, 2.0] {
        let draws: Vec<f64> = (0..100_000)
            .map(|_| MixPlan::sample_with(&[0], alpha, &mut rng).unwrap().lambdas[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "alpha {alpha}: mean {mean}");
        assert!(draws.iter().all(|l| (0.0..=1.0).contains(l)));
    }
}

#[test]
fn mix_ratio_uniform_at_alpha_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draws: Vec<f64> = (0..10_000)
        .map(|_| MixPlan::sample_with(&[0], 1.0, &mut rng).unwrap().lambdas[0])
        .collect();
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample KS statistic
    assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn mix_plan_reproducible_and_per_layer() {
    let a = sample_mix_ratios(&[1, 2, 3], 0.3, 99).unwrap();
    assert_eq!(a, sample_mix_ratios(&[1, 2, 3], 0.3, 99).unwrap());
    assert_eq!(a.lambda_for(2), Some(a.lambdas[1]));
    assert_eq!(a.lambda_for(4), None);
    assert!(sample_mix_ratios(&[1], 0.0, 1).is_err());
}

fn random_pair(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FeaturePair {
    let a = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-2.0..2.0));
    let b = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-2.0..2.0));
    FeaturePair::new(a, b, 0, 1).unwrap()
}

#[test]
fn kmax_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let t = Tensor::from_fn(&[5, 7], |_| rng.random_range(-1.0..1.0));
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(k_maxpooling(&t, 1).unwrap(), max);
        assert!((k_maxpooling(&t, 35).unwrap() - t.mean()).abs() < 1e-12);
        assert!(k_maxpooling(&t, 0).is_err());
        assert!(k_maxpooling(&t, 36).is_err());
    }
}

#[test]
fn ssmc_reduction_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let pair = random_pair(&mut rng, c, h, w);
        let k = rng.random_range(1..=h * w);
        assert!((ssmc_loss(&pair, k, 0.0).unwrap() - ssc_loss(&pair, k).unwrap()).abs() < 1e-6);
        let full = ssc_loss(&pair, h * w).unwrap();
        assert!((full - sc_loss(&pair) / (c * h * w) as f64).abs() < 1e-6);
        assert!(ssmc_loss(&pair, k, 0.05).unwrap() <= ssc_loss(&pair, k).unwrap());
    }
}

#[test]
fn ssmc_zero_for_identical_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random_pair(&mut rng, 4, 4, 4);
    let same = FeaturePair::new(p.main.clone(), p.main.clone(), 0, 0).unwrap();
    assert_eq!(channel_mean_variance(&same).sum(), 0.0);
    assert_eq!(ssmc_loss(&same, 1, 0.01).unwrap(), 0.0);
    // scaling one stream per position does not change anything after normalisation
    let scaled = FeaturePair::new(p.main.clone(), p.main.scale(3.5), 0, 1).unwrap();
    assert!(ssc_loss(&scaled, 1).unwrap() < 1e-12);
}

#[test]
fn batched_ssmc_matches_plain_and_differentiates() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, c, h, w) = (3, 4, 4, 4);
    let a = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-2.0..2.0));
    let b = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-2.0..2.0));
    let k = 3;
    let plain: f64 = (0..n)
        .map(|i| {
            let sl = |t: &Tensor| Tensor::new(&[c, h, w], t.data()[i * c * h * w..(i + 1) * c * h * w].to_vec());
            ssmc_loss(&FeaturePair::new(sl(&a), sl(&b), 0, 1).unwrap(), k, 0.01).unwrap()
        })
        .sum::<f64>()
        / n as f64;
    let tape = Tape::new();
    let va = tape.param(a.clone());
    let vb = tape.param(b.clone());
    let loss = ssmc_loss_var(va, vb, k, 0.01);
    assert!((loss.item() - plain).abs() < 1e-12);
    let g = tape.backward(loss).get_or_zeros(va);
    let num = numeric_grad(
        |x| {
            let t = Tape::new();
            ssmc_loss_var(t.constant(x.clone()), t.constant(b.clone()), k, 0.01).item()
        },
        &a,
        1e-6,
    );
    assert!(g.max_abs_diff(&num) < 1e-6, "{}", g.max_abs_diff(&num));
}

#[test]
fn gradient_reversal_flips_feature_gradient_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut r = |s: &[usize]| Tensor::from_fn(s, |_| rng.random_range(-0.5..0.5));
    let (n, d, hdim, k) = (4, 6, 5, 3);
    let feats = r(&[n, d]);
    let w1 = r(&[hdim, d]);
    let b1 = r(&[hdim]);
    let w2 = r(&[k, hdim]);
    let b2 = r(&[k]);
    let labels = [0, 2, 1, 2];
    let scale = 0.7;

    let value = |f: &Tensor, w1: &Tensor| {
        let t = Tape::new();
        let clf = DomainClassifier {
            w1: t.constant(w1.clone()),
            b1: t.constant(b1.clone()),
            w2: t.constant(w2.clone()),
            b2: t.constant(b2.clone()),
        };
        domain_adversarial_loss_var(t.constant(f.clone()), &clf, &labels, scale).unwrap().item()
    };

    let tape = Tape::new();
    let vf = tape.param(feats.clone());
    let clf = DomainClassifier {
        w1: tape.param(w1.clone()),
        b1: tape.param(b1.clone()),
        w2: tape.param(w2.clone()),
        b2: tape.param(b2.clone()),
    };
    let loss = domain_adversarial_loss_var(vf, &clf, &labels, scale).unwrap();
    let grads = tape.backward(loss);

    let num_f = numeric_grad(|f| value(f, &w1), &feats, 1e-6);
    let num_w = numeric_grad(|w| value(&feats, w), &w1, 1e-6);
    assert!(grads.get_or_zeros(vf).max_abs_diff(&num_f.scale(-scale)) < 1e-7);
    assert!(grads.get_or_zeros(clf.w1).max_abs_diff(&num_w) < 1e-7);
    assert!(num_f.sq_norm() > 0.0);
}

#[test]
fn irm_closed_form_single_logit() {
    for i in -40..=40 {
        let a = i as f64 / 8.0;
        let term = ScaledSampleTerm {
            loss: LogitBce { labels: vec![1.0] },
            outputs: vec![[a]],
        };
        let expect = ((1.0 - sigmoid(a)) * a).powi(2);
        assert!((irm_penalty(&[&term]).unwrap() - expect).abs() < 1e-6);
    }
}

#[test]
fn irm_matches_finite_differences_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let cls = ScaledSampleTerm {
            loss: LogitBce {
                labels: (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
            },
            outputs: (0..n).map(|_| [rng.random_range(-4.0..4.0)]).collect(),
        };
        let reg = ScaledSampleTerm {
            loss: SquaredDelta {
                targets: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
            },
            outputs: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
        };
        let terms: [&dyn IrmTerm; 2] = [&cls, &reg];
        let exact = irm_penalty(&terms).unwrap();
        let numeric = irm_penalty_numeric(&terms, 1e-5);
        assert!((exact - numeric).abs() <= 1e-4 * exact.abs().max(1e-6), "{exact} vs {numeric}");
    }
}
