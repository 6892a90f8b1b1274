//! Domain-generalisation losses: feature mixup, kMaxpooling / SSMC, the
//! gradient-reversed domain classifier and IRM penalties.

use aqua_autodiff::{scale_derivative_and_grad, softmax, Real, SampleLoss, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::losses::bce_with_logit;

/// Added under the square root of the per-position feature norm.
pub const NORM_EPS: f64 = 1e-12;

/// Default SSMC margin on unit-normalised features.
pub const SSMC_DELTA: f64 = 0.01;

/// Siamese feature maps of shape `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub main: Tensor,
    pub branch: Tensor,
    pub domain_main: usize,
    pub domain_branch: usize,
}

impl FeaturePair {
    pub fn new(main: Tensor, branch: Tensor, domain_main: usize, domain_branch: usize) -> Result<Self> {
        if main.shape() != branch.shape() {
            return Err(Error::ShapeMismatch(main.shape().to_vec(), branch.shape().to_vec()));
        }
        if main.ndim() != 3 {
            return Err(Error::Invalid(format!("feature maps must be [C, H, W], got {:?}", main.shape())));
        }
        if !main.all_finite() || !branch.all_finite() {
            return Err(Error::Invalid("non-finite feature".into()));
        }
        Ok(Self {
            main,
            branch,
            domain_main,
            domain_branch,
        })
    }
}

/// `lambda * main + (1 - lambda) * branch`.
pub fn domain_mixup(pair: &FeaturePair, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange {
            name: "lambda",
            value: lambda,
            expected: "[0, 1]",
        });
    }
    Ok(pair.main.zip_map(&pair.branch, |a, b| lambda * a + (1.0 - lambda) * b))
}

/// Per-layer mix ratios for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub layers: Vec<usize>,
    pub alpha: f64,
    pub lambdas: Vec<f64>,
}

impl MixPlan {
    /// Ratio for `layer`, or `None` when that layer is not mixed.
    pub fn lambda_for(&self, layer: usize) -> Option<f64> {
        self.layers.iter().position(|&l| l == layer).map(|i| self.lambdas[i])
    }

    pub fn sample_with<G: Rng + ?Sized>(layers: &[usize], alpha: f64, rng: &mut G) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::OutOfRange {
                name: "alpha",
                value: alpha,
                expected: "> 0",
            });
        }
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(Self {
            layers: layers.to_vec(),
            alpha,
            lambdas: layers.iter().map(|_| beta.sample(rng)).collect(),
        })
    }
}

/// Draw `lambda_k ~ Beta(alpha, alpha)` independently for every layer.
pub fn sample_mix_ratios(layers: &[usize], alpha: f64, rng_seed: u64) -> Result<MixPlan> {
    MixPlan::sample_with(layers, alpha, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// Mean of the `k` largest entries.
pub fn k_maxpooling(h: &Tensor, k: usize) -> Result<f64> {
    let n = h.numel();
    if k < 1 || k > n {
        return Err(Error::OutOfRange {
            name: "k",
            value: k as f64,
            expected: "1 <= k <= H*W",
        });
    }
    let mut v = h.data().to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// `k = H * W / 16`, at least 1.
pub fn default_k(height: usize, width: usize) -> usize {
    (height * width / 16).max(1)
}

fn normalize_positions(x: &Tensor) -> Tensor {
    let (c, hw) = (x.dim(0), x.dim(1) * x.dim(2));
    let mut out = x.clone();
    for p in 0..hw {
        let norm = ((0..c).map(|ch| x.data()[ch * hw + p].powi(2)).sum::<f64>() + NORM_EPS).sqrt();
        for ch in 0..c {
            out.data_mut()[ch * hw + p] /= norm;
        }
    }
    out
}

/// Channel-mean of `(F1 - F2)^2` after per-position L2 normalisation, `[H, W]`.
pub fn channel_mean_variance(pair: &FeaturePair) -> Tensor {
    let (c, h, w) = (pair.main.dim(0), pair.main.dim(1), pair.main.dim(2));
    let a = normalize_positions(&pair.main);
    let b = normalize_positions(&pair.branch);
    let mut v = Tensor::zeros(&[h, w]);
    for ch in 0..c {
        for p in 0..h * w {
            let d = a.data()[ch * h * w + p] - b.data()[ch * h * w + p];
            v.data_mut()[p] += d * d / c as f64;
        }
    }
    v
}

/// `||F1 - F2||^2` on normalised features (summed over every element).
pub fn sc_loss(pair: &FeaturePair) -> f64 {
    let v = channel_mean_variance(pair);
    v.sum() * pair.main.dim(0) as f64
}

pub fn ssc_loss(pair: &FeaturePair, k: usize) -> Result<f64> {
    k_maxpooling(&channel_mean_variance(pair), k)
}

/// kMaxpooling of `max(V_mean - delta, 0)`.
pub fn ssmc_loss(pair: &FeaturePair, k: usize, delta: f64) -> Result<f64> {
    let v = channel_mean_variance(pair).map(|x| (x - delta).max(0.0));
    k_maxpooling(&v, k)
}

/// Batched SSMC on `[N, C, H, W]` streams, averaged over the batch.
pub fn ssmc_loss_var<'t>(main: Var<'t>, branch: Var<'t>, k: usize, delta: f64) -> Var<'t> {
    let shape = main.shape();
    assert_eq!(shape, branch.shape(), "ssmc stream shapes differ");
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let a = main.l2_normalize_channels(NORM_EPS);
    let b = branch.l2_normalize_channels(NORM_EPS);
    let v = (a - b).square().mean_axis(1).reshape(&[n, h * w]);
    (v - delta).relu().topk_mean(k).mean()
}

/// Mean softmax cross entropy of `[N, K]` domain logits.
pub fn domain_adversarial_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = check_domain_labels(logits.shape(), labels)?;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let p = softmax(&logits.data()[i * k..(i + 1) * k]);
        total -= p[l].max(f64::MIN_POSITIVE).ln();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn check_domain_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(shape.to_vec(), vec![labels.len()]));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::OutOfRange {
            name: "domain label",
            value: bad as f64,
            expected: "label < number of domains",
        });
    }
    Ok((shape[0], k))
}

/// Two-layer domain classifier weights on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DomainClassifier<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> DomainClassifier<'t> {
    pub fn logits(&self, features: Var<'t>) -> Var<'t> {
        features.linear(self.w1, self.b1).relu().linear(self.w2, self.b2)
    }
}

/// Domain CE on gradient-reversed `[N, C]` features. The classifier trains
/// normally; the features receive the negated gradient scaled by
/// `grl_scale`.
pub fn domain_adversarial_loss_var<'t>(
    features: Var<'t>,
    classifier: &DomainClassifier<'t>,
    labels: &[usize],
    grl_scale: f64,
) -> Result<Var<'t>> {
    let logits = classifier.logits(features.grad_reverse(grl_scale));
    check_domain_labels(&logits.shape(), labels)?;
    let n = labels.len().max(1) as f64;
    Ok(logits.softmax_cross_entropy(labels, &vec![1.0 / n; labels.len()]))
}

/// A loss term that can be differentiated in a scalar output scale `r`.
pub trait IrmTerm {
    /// Loss with the term's outputs multiplied by `r`.
    fn loss_at_scale(&self, r: f64) -> f64;
    /// `dL/dr` at `r = 1`.
    fn scale_derivative(&self) -> f64;
}

/// Rows of outputs fed through a per-sample loss.
pub struct ScaledSampleTerm<const N: usize, L> {
    pub loss: L,
    pub outputs: Vec<[f64; N]>,
}

impl<const N: usize, L: SampleLoss<N>> IrmTerm for ScaledSampleTerm<N, L> {
    fn loss_at_scale(&self, r: f64) -> f64 {
        self.outputs
            .iter()
            .enumerate()
            .map(|(i, x)| self.loss.eval::<f64>(i, x.map(|v| v * r)))
            .sum()
    }

    fn scale_derivative(&self) -> f64 {
        self.outputs
            .iter()
            .enumerate()
            .map(|(i, x)| scale_derivative_and_grad(&self.loss, i, *x).0)
            .sum()
    }
}

/// Binary CE on logits, one label per row.
pub struct LogitBce {
    pub labels: Vec<f64>,
}

impl SampleLoss<1> for LogitBce {
    fn eval<R: Real>(&self, row: usize, x: [R; 1]) -> R {
        bce_with_logit(x[0], self.labels[row])
    }
}

/// `sum_i (t_i - t*_i)^2` on delta rows.
pub struct SquaredDelta {
    pub targets: Vec<[f64; 4]>,
}

impl SampleLoss<4> for SquaredDelta {
    fn eval<R: Real>(&self, row: usize, x: [R; 4]) -> R {
        (0..4).fold(R::cst(0.0), |acc, k| acc + (x[k] - self.targets[row][k]).square())
    }
}

/// `sum_terms (dL_term/dr at r = 1)^2`.
pub fn irm_penalty(terms: &[&dyn IrmTerm]) -> Result<f64> {
    let mut total = 0.0;
    for (i, t) in terms.iter().enumerate() {
        let d = t.scale_derivative();
        if !d.is_finite() {
            return Err(Error::Invalid(format!("IRM term {i} is not differentiable at r = 1")));
        }
        total += d * d;
    }
    Ok(total)
}

/// The same penalty with central differences of step `h` in `r`.
pub fn irm_penalty_numeric(terms: &[&dyn IrmTerm], h: f64) -> f64 {
    terms
        .iter()
        .map(|t| ((t.loss_at_scale(1.0 + h) - t.loss_at_scale(1.0 - h)) / (2.0 * h)).powi(2))
        .sum()
}
