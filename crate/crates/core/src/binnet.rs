//! Binary multilayer perceptron over sampled weights.
//!
//! Layer `l` holds an `out × in` weight matrix. Hidden pre-activations are
//! scaled by `1/sqrt(fan_in)` so that sums of `±1`-weighted inputs stay
//! O(1) regardless of width and the RBG width keeps its meaning; the output
//! layer's raw weighted sums are the logits.
//!
//! Backward passes use surrogate derivatives for the step activations:
//! `sign` backpropagates through `hardtanh` (mask `|z| ≤ 1`) and the reverse
//! binary gate `RBG(z, a) = 1[|z| ≥ a/2]` through its piecewise surrogate
//! `sRBG`, whose derivative is `sign(z)` on `a/2 < |z| < 3a/2` and zero
//! elsewhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{argmax, dot, log_sum_exp, sign0, softmax_into, DenseMatrix, FastStream, RngStream};
use crate::posterior::{sample_hard_from_probability, BernoulliPosterior, RelaxedSample};
use crate::uncertainty::PredictionSet;

/// Default RBG gate width `a`.
pub const DEFAULT_RBG_WIDTH: f64 = 1.0;
/// Default relaxation temperature `T`.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `sign` forward, `hardtanh` backward.
    SignHardtanh,
    /// Reverse binary gate forward, `sRBG` backward.
    Rbg,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64, width: f64) -> f64 {
        match self {
            Activation::SignHardtanh => sign0(z),
            Activation::Rbg => {
                if z.abs() < 0.5 * width {
                    0.0
                } else {
                    1.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative used by the backward pass.
    #[inline]
    pub fn surrogate_grad(self, z: f64, width: f64) -> f64 {
        match self {
            Activation::SignHardtanh => {
                if z.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Rbg => {
                let a = z.abs();
                if a > 0.5 * width && a < 1.5 * width {
                    sign0(z)
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("network needs at least one weight layer (got {0} sizes)")]
    TooFewLayers(usize),
    #[error("layer sizes must be positive")]
    EmptyLayer,
    #[error("classification output needs at least 2 classes, got {0}")]
    OutputTooSmall(usize),
    #[error("RBG width must be positive, got {0}")]
    BadRbgWidth(f64),
}

fn default_rbg_width() -> f64 {
    DEFAULT_RBG_WIDTH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input, hidden..., output.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_rbg_width")]
    pub rbg_width: f64,
    #[serde(default)]
    pub bias: bool,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self, SpecError> {
        let spec = Self {
            layer_sizes,
            activation,
            rbg_width: DEFAULT_RBG_WIDTH,
            bias: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.layer_sizes.len() < 2 {
            return Err(SpecError::TooFewLayers(self.layer_sizes.len()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(SpecError::EmptyLayer);
        }
        let out = self.output_size();
        if out < 2 {
            return Err(SpecError::OutputTooSmall(out));
        }
        if !(self.rbg_width > 0.0) {
            return Err(SpecError::BadRbgWidth(self.rbg_width));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(out, in)` per weight layer.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_sizes.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shapes().iter().map(|(o, i)| o * i).sum()
    }

    /// Trainable parameter count: weights plus biases when enabled.
    pub fn parameter_count(&self) -> usize {
        let biases: usize = if self.bias {
            self.layer_sizes[1..].iter().sum()
        } else {
            0
        };
        self.weight_count() + biases
    }

    pub fn zero_biases(&self) -> Vec<Vec<f64>> {
        self.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect()
    }
}

/// Everything one backward pass needs from the matching forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape<'w> {
    pub input: Vec<f64>,
    /// Scaled pre-activations per layer; the last entry holds the logits.
    pub pre: Vec<Vec<f64>>,
    /// Hidden-layer activations (one fewer than `pre`).
    pub post: Vec<Vec<f64>>,
    pub weights: &'w [DenseMatrix],
}

impl ForwardTape<'_> {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("non-empty tape")
    }
}

/// Mean MC gradient of the loss w.r.t. the natural parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradient {
    pub lambda: Vec<DenseMatrix>,
    /// Gradient for the real-valued biases, present when the spec has them.
    pub bias: Option<Vec<Vec<f64>>>,
    pub loss: f64,
}

impl LossGradient {
    pub fn all_finite(&self) -> bool {
        self.lambda.iter().all(DenseMatrix::all_finite)
            && self
                .bias
                .as_ref()
                .is_none_or(|b| b.iter().flatten().all(|v| v.is_finite()))
    }
}

fn check_shapes(spec: &NetworkSpec, weights: &[DenseMatrix], x: &[f64]) {
    assert_eq!(x.len(), spec.input_size(), "input length does not match network");
    assert_eq!(weights.len(), spec.num_layers(), "weight layer count");
    for (w, shape) in weights.iter().zip(spec.weight_shapes()) {
        assert_eq!(w.shape(), shape, "weight shape does not match network");
    }
}

#[inline]
fn layer_scale(w: &DenseMatrix, l: usize, layers: usize) -> f64 {
    if l + 1 == layers {
        1.0
    } else {
        1.0 / (w.cols() as f64).sqrt()
    }
}

/// Runs the network on one input.
///
/// Panics on shape mismatches.
pub fn forward<'w>(
    spec: &NetworkSpec,
    weights: &'w [DenseMatrix],
    biases: Option<&[Vec<f64>]>,
    x: &[f64],
) -> (Vec<f64>, ForwardTape<'w>) {
    check_shapes(spec, weights, x);
    let layers = spec.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers - 1);
    for (l, w) in weights.iter().enumerate() {
        let input: &[f64] = if l == 0 { x } else { &post[l - 1] };
        let scale = layer_scale(w, l, layers);
        let mut z = vec![0.0; w.rows()];
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = dot(w.row(i), input) * scale;
            if let Some(b) = biases {
                *zi += b[l][i];
            }
        }
        if l + 1 < layers {
            post.push(
                z.iter()
                    .map(|&v| spec.activation.apply(v, spec.rbg_width))
                    .collect(),
            );
        }
        pre.push(z);
    }
    let logits = pre[layers - 1].clone();
    let tape = ForwardTape {
        input: x.to_vec(),
        pre,
        post,
        weights,
    };
    (logits, tape)
}

/// Softmax cross-entropy: `log Σ exp(logits) − logits[label]` and its
/// gradient `softmax(logits) − onehot(label)`.
pub fn loss_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < logits.len(), "label {label} out of range");
    // Shifting by the label logit avoids cancellation when the loss is tiny.
    let shift = logits[label];
    let shifted: Vec<f64> = logits.iter().map(|&z| z - shift).collect();
    let loss = log_sum_exp(&shifted).max(0.0);
    let mut grad = vec![0.0; logits.len()];
    softmax_into(logits, &mut grad);
    grad[label] -= 1.0;
    (loss, grad)
}

/// Accumulates `scale_l ⊙ ∂𝓛/∂W_l` into `out` for every layer, where
/// `scale_l` is `chain[l]` when given and 1 otherwise. Bias gradients are
/// accumulated into `bias_out` when given.
fn backward_accumulate(
    spec: &NetworkSpec,
    tape: &ForwardTape<'_>,
    dlogits: &[f64],
    chain: Option<&[DenseMatrix]>,
    weight_scale: f64,
    out: &mut [DenseMatrix],
    mut bias_out: Option<&mut [Vec<f64>]>,
) {
    let layers = spec.num_layers();
    let mut dz = dlogits.to_vec();
    for l in (0..layers).rev() {
        let w = &tape.weights[l];
        let input: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
        let s = layer_scale(w, l, layers);
        if let Some(b) = bias_out.as_deref_mut() {
            for (bi, &d) in b[l].iter_mut().zip(&dz) {
                *bi += weight_scale * d;
            }
        }
        let g = &mut out[l];
        for (i, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let coef = weight_scale * d * s;
            let grow = g.row_mut(i);
            match chain {
                Some(c) => {
                    for ((gj, &xj), &cj) in grow.iter_mut().zip(input).zip(c[l].row(i)) {
                        *gj += coef * xj * cj;
                    }
                }
                None => {
                    for (gj, &xj) in grow.iter_mut().zip(input) {
                        *gj += coef * xj;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut dh = vec![0.0; w.cols()];
        for (i, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (h, &wij) in dh.iter_mut().zip(w.row(i)) {
                *h += d * s * wij;
            }
        }
        dz = dh
            .iter()
            .zip(&tape.pre[l - 1])
            .map(|(&h, &z)| h * spec.activation.surrogate_grad(z, spec.rbg_width))
            .collect();
    }
}

/// `∂𝓛/∂W` and `∂𝓛/∂b` for the weights recorded in `tape`.
pub fn backward(
    spec: &NetworkSpec,
    tape: &ForwardTape<'_>,
    dlogits: &[f64],
) -> (Vec<DenseMatrix>, Vec<Vec<f64>>) {
    let mut grads: Vec<DenseMatrix> = spec
        .weight_shapes()
        .iter()
        .map(|&(r, c)| DenseMatrix::zeros(r, c))
        .collect();
    let mut bias = spec.zero_biases();
    backward_accumulate(spec, tape, dlogits, None, 1.0, &mut grads, Some(&mut bias));
    (grads, bias)
}

/// Reusable buffers for [`grad_lambda_mc`].
#[derive(Clone, Debug)]
pub struct GradWorkspace {
    omega: Vec<DenseMatrix>,
    chain: Vec<DenseMatrix>,
    exp2l: Vec<DenseMatrix>,
}

impl GradWorkspace {
    pub fn new(spec: &NetworkSpec) -> Self {
        let z = || {
            spec.weight_shapes()
                .iter()
                .map(|&(r, c)| DenseMatrix::zeros(r, c))
                .collect::<Vec<_>>()
        };
        Self {
            omega: z(),
            chain: z(),
            exp2l: z(),
        }
    }
}

/// Draws relaxed weights `ω = tanh((λ + δ)/T)` and the chain factor
/// `(1 − ω²)/T` into the workspace, consuming one uniform per synapse in
/// row-major layer order (the same order as `sample_relaxed`).
///
/// At `T = 1`, with `u = e^{2λ} ε/(1 − ε)` and `r = 1/(1 + u)
/// = (1 − ε)/(1 − ε + e^{2λ} ε)`, we have `ω = 1 − 2r` and
/// `1 − ω² = 4r(1 − r)`: one division per draw, and saturated `e^{2λ}`
/// (0 or ∞) lands exactly on `ω = ∓1` with a zero chain factor.
fn fill_relaxed(ws: &mut GradWorkspace, post: &BernoulliPosterior, temperature: f64, rng: &mut FastStream) {
    // With u = e^{2λ}ε/(1−ε), tanh((λ + δ)/T) = 1 − 2r for r = 1/(1 + u^{1/T}).
    let inv_t = 1.0 / temperature;
    let unit = temperature == 1.0;
    for l in 0..post.num_layers() {
        let omega = ws.omega[l].as_mut_slice();
        let chain = ws.chain[l].as_mut_slice();
        let e = ws.exp2l[l].as_slice();
        for ((o, c), &a) in omega.iter_mut().zip(chain.iter_mut()).zip(e) {
            let eps = rng.uniform01();
            let q = 1.0 - eps;
            let r = if unit {
                q / (q + a * eps)
            } else {
                1.0 / (1.0 + (a * eps / q).powf(inv_t))
            };
            *o = 1.0 - 2.0 * r;
            *c = 4.0 * r * (1.0 - r) * inv_t;
        }
    }
}

/// Monte-Carlo estimate of `∂𝓛/∂λ` from `k` relaxed weight draws.
///
/// Each draw `j` uses the sub-stream `rng.substream(&[tag, j])`, where `tag`
/// is one word drawn from `rng`; the per-draw gradients are summed in draw
/// order and divided by `k`.
#[allow(clippy::too_many_arguments)]
pub fn grad_lambda_mc(
    spec: &NetworkSpec,
    post: &BernoulliPosterior,
    biases: Option<&[Vec<f64>]>,
    x: &[f64],
    label: usize,
    k: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> LossGradient {
    let mut ws = GradWorkspace::new(spec);
    grad_lambda_mc_batch(spec, post, biases, &[x], &[label], k, temperature, rng, &mut ws)
}

/// Mini-batch form of [`grad_lambda_mc`]: every relaxed draw is shared by
/// the whole batch and gradients are averaged over draws and samples.
#[allow(clippy::too_many_arguments)]
pub fn grad_lambda_mc_batch(
    spec: &NetworkSpec,
    post: &BernoulliPosterior,
    biases: Option<&[Vec<f64>]>,
    xs: &[&[f64]],
    labels: &[usize],
    k: usize,
    temperature: f64,
    rng: &mut RngStream,
    ws: &mut GradWorkspace,
) -> LossGradient {
    use rand::RngCore;
    assert!(k >= 1, "need at least one MC sample");
    assert!(temperature > 0.0, "temperature must be positive");
    assert_eq!(xs.len(), labels.len());
    assert!(!xs.is_empty(), "empty batch");
    assert_eq!(post.shapes(), spec.weight_shapes(), "posterior does not match network");

    if temperature == 1.0 {
        for (e, l) in ws.exp2l.iter_mut().zip(post.lambda()) {
            for (ei, &li) in e.as_mut_slice().iter_mut().zip(l.as_slice()) {
                *ei = (2.0 * li).exp();
            }
        }
    }
    let tag = rng.next_u64();
    let mut grads: Vec<DenseMatrix> = spec
        .weight_shapes()
        .iter()
        .map(|&(r, c)| DenseMatrix::zeros(r, c))
        .collect();
    let mut bias_grads = biases.map(|_| spec.zero_biases());
    let mut loss = 0.0;
    let norm = 1.0 / (k * xs.len()) as f64;
    for j in 0..k {
        let mut fast = rng.substream(&[tag, j as u64]).fast();
        fill_relaxed(ws, post, temperature, &mut fast);
        for (x, &y) in xs.iter().zip(labels) {
            let (logits, tape) = forward(spec, &ws.omega, biases, x);
            let (l, dlogits) = loss_ce(&logits, y);
            loss += l * norm;
            backward_accumulate(
                spec,
                &tape,
                &dlogits,
                Some(&ws.chain),
                norm,
                &mut grads,
                bias_grads.as_deref_mut(),
            );
        }
    }
    LossGradient {
        lambda: grads,
        bias: bias_grads,
        loss,
    }
}

/// `∂𝓛/∂λ` averaged over explicitly supplied relaxation noise, one `δ` set
/// per draw. Used to check the estimator against finite differences.
pub fn grad_lambda_with_noise(
    spec: &NetworkSpec,
    post: &BernoulliPosterior,
    biases: Option<&[Vec<f64>]>,
    x: &[f64],
    label: usize,
    deltas: &[Vec<DenseMatrix>],
    temperature: f64,
) -> LossGradient {
    assert!(!deltas.is_empty());
    let mut grads: Vec<DenseMatrix> = spec
        .weight_shapes()
        .iter()
        .map(|&(r, c)| DenseMatrix::zeros(r, c))
        .collect();
    let mut bias_grads = biases.map(|_| spec.zero_biases());
    let norm = 1.0 / deltas.len() as f64;
    let mut loss = 0.0;
    for delta in deltas {
        let sample = RelaxedSample::from_noise(post.lambda(), delta.clone(), temperature);
        let chain: Vec<DenseMatrix> = sample
            .omega
            .iter()
            .map(|o| o.map(|w| (1.0 - w * w) / temperature))
            .collect();
        let (logits, tape) = forward(spec, &sample.omega, biases, x);
        let (l, dlogits) = loss_ce(&logits, label);
        loss += l * norm;
        backward_accumulate(
            spec,
            &tape,
            &dlogits,
            Some(&chain),
            norm,
            &mut grads,
            bias_grads.as_deref_mut(),
        );
    }
    LossGradient {
        lambda: grads,
        bias: bias_grads,
        loss,
    }
}

/// Softmax outputs of `k` independently hard-sampled networks on one input.
pub fn mc_predictive(
    spec: &NetworkSpec,
    post: &BernoulliPosterior,
    biases: Option<&[Vec<f64>]>,
    x: &[f64],
    k: usize,
    rng: &mut RngStream,
) -> PredictionSet {
    let probs = post.probability();
    mc_predictive_with_probability(spec, &probs, biases, x, k, rng)
}

/// As [`mc_predictive`], with `σ(2λ)` precomputed by the caller.
pub fn mc_predictive_with_probability(
    spec: &NetworkSpec,
    probs: &[DenseMatrix],
    biases: Option<&[Vec<f64>]>,
    x: &[f64],
    k: usize,
    rng: &mut RngStream,
) -> PredictionSet {
    assert!(k >= 1, "need at least one MC sample");
    let vectors = (0..k)
        .map(|_| {
            let w = sample_hard_from_probability(probs, rng);
            let (logits, _) = forward(spec, &w, biases, x);
            let mut p = vec![0.0; logits.len()];
            softmax_into(&logits, &mut p);
            p
        })
        .collect();
    PredictionSet::new(vectors)
}

/// Prediction sets for a batch of inputs that share the same `k` weight
/// draws (one draw per MC sample for the whole batch).
pub fn mc_predictive_batch(
    spec: &NetworkSpec,
    probs: &[DenseMatrix],
    biases: Option<&[Vec<f64>]>,
    xs: &[&[f64]],
    k: usize,
    rng: &mut RngStream,
) -> Vec<PredictionSet> {
    assert!(k >= 1, "need at least one MC sample");
    let mut per_input: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(k); xs.len()];
    for _ in 0..k {
        let w = sample_hard_from_probability(probs, rng);
        for (x, acc) in xs.iter().zip(per_input.iter_mut()) {
            let (logits, _) = forward(spec, &w, biases, x);
            let mut p = vec![0.0; logits.len()];
            softmax_into(&logits, &mut p);
            acc.push(p);
        }
    }
    per_input.into_iter().map(PredictionSet::new).collect()
}

/// Class predicted by the MC-mean softmax.
pub fn mean_prediction(set: &PredictionSet) -> usize {
    argmax(&set.mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize], act: Activation) -> NetworkSpec {
        NetworkSpec::new(sizes.to_vec(), act).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert_eq!(
            NetworkSpec::new(vec![4], Activation::Identity),
            Err(SpecError::TooFewLayers(1))
        );
        assert_eq!(
            NetworkSpec::new(vec![4, 1], Activation::Identity),
            Err(SpecError::OutputTooSmall(1))
        );
        let s = spec(&[784, 100, 10], Activation::Rbg);
        assert_eq!(s.weight_shapes(), vec![(100, 784), (10, 100)]);
        assert_eq!(s.parameter_count(), 79_400);
    }

    #[test]
    fn identity_forward_hand_sum() {
        let s = spec(&[2, 2], Activation::Identity);
        let w = vec![DenseMatrix::from_vec(2, 2, vec![1.0, 1.0, -1.0, 1.0])];
        let (logits, _) = forward(&s, &w, None, &[1.0, 1.0]);
        assert_eq!(logits, vec![2.0, 0.0]);

        // Hidden layers are scaled by 1/sqrt(fan_in).
        let s = spec(&[4, 1, 2], Activation::Identity);
        let w = vec![DenseMatrix::filled(1, 4, 1.0), DenseMatrix::filled(2, 1, 1.0)];
        let (logits, tape) = forward(&s, &w, None, &[1.0; 4]);
        assert_eq!(tape.pre[0], vec![2.0]);
        assert_eq!(logits, vec![2.0, 2.0]);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::SignHardtanh.apply(0.0, 1.0), 0.0);
        assert_eq!(Activation::SignHardtanh.apply(-0.3, 1.0), -1.0);
        assert_eq!(Activation::Rbg.apply(0.2, 1.0), 0.0);
        assert_eq!(Activation::Rbg.apply(1.0, 1.0), 1.0);
        assert_eq!(Activation::Rbg.apply(-0.5, 1.0), 1.0);
        assert_eq!(Activation::SignHardtanh.surrogate_grad(1.0, 1.0), 1.0);
        assert_eq!(Activation::SignHardtanh.surrogate_grad(1.0001, 1.0), 0.0);
        assert_eq!(Activation::Rbg.surrogate_grad(1.0, 1.0), 1.0);
        assert_eq!(Activation::Rbg.surrogate_grad(-1.0, 1.0), -1.0);
        assert_eq!(Activation::Rbg.surrogate_grad(0.3, 1.0), 0.0);
        assert_eq!(Activation::Rbg.surrogate_grad(1.6, 1.0), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = loss_ce(&[0.3; 4], 2);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        let (l, g) = loss_ce(&[10.0, 0.0], 0);
        assert!((l - 4.539_889_921_686_465e-5).abs() < 1e-18);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn chain_factor_limits() {
        // A single synapse with ω = 0 (λ = δ = 0): ∂𝓛/∂λ = ∂𝓛/∂ω.
        let s = spec(&[1, 2], Activation::Identity);
        let post = BernoulliPosterior::constant(&[(2, 1)], 0.0);
        let zero = vec![vec![DenseMatrix::zeros(2, 1)]];
        let g = grad_lambda_with_noise(&s, &post, None, &[1.0], 0, &zero, 1.0);
        let w = vec![DenseMatrix::zeros(2, 1)];
        let (logits, tape) = forward(&s, &w, None, &[1.0]);
        let (_, dl) = loss_ce(&logits, 0);
        let (dw, _) = backward(&s, &tape, &dl);
        assert_eq!(g.lambda[0], dw[0]);

        let post = BernoulliPosterior::constant(&[(2, 1)], 40.0);
        let g = grad_lambda_with_noise(&s, &post, None, &[1.0], 1, &zero, 1.0);
        assert!(g.lambda[0].as_slice().iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn fast_relaxed_draw_matches_reference() {
        let s = spec(&[6, 5, 3], Activation::Identity);
        let mut init = RngStream::new(1, 2);
        let post = BernoulliPosterior::init_uniform(&s.weight_shapes(), 3.0, &mut init);
        for &t in &[1.0, 0.5] {
            let mut ws = GradWorkspace::new(&s);
            for (e, l) in ws.exp2l.iter_mut().zip(post.lambda()) {
                *e = l.map(|v| (2.0 * v).exp());
            }
            fill_relaxed(&mut ws, &post, t, &mut RngStream::new(5, 5).fast());
            let reference = post.sample_relaxed(t, &mut RngStream::new(5, 5));
            for (a, b) in ws.omega.iter().zip(&reference.omega) {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            for (c, o) in ws.chain.iter().zip(&reference.omega) {
                for (x, w) in c.as_slice().iter().zip(o.as_slice()) {
                    assert!((x - (1.0 - w * w) / t).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_mc_is_deterministic() {
        let s = spec(&[8, 4, 3], Activation::Rbg);
        let mut init = RngStream::new(3, 3);
        let post = BernoulliPosterior::init_uniform(&s.weight_shapes(), 0.5, &mut init);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 2.0).collect();
        let a = grad_lambda_mc(&s, &post, None, &x, 1, 5, 1.0, &mut RngStream::new(8, 0));
        let b = grad_lambda_mc(&s, &post, None, &x, 1, 5, 1.0, &mut RngStream::new(8, 0));
        assert_eq!(a, b);
        assert!(a.all_finite());
        assert!(a.loss >= 0.0);
    }

    #[test]
    fn mc_predictive_examples() {
        let s = spec(&[5, 6, 3], Activation::SignHardtanh);
        let x = [0.5, -1.0, 2.0, 0.1, -0.3];
        let mut rng = RngStream::new(0, 0);

        let mut init = RngStream::new(9, 0);
        let mut sat = BernoulliPosterior::init_uniform(&s.weight_shapes(), 1.0, &mut init);
        for m in sat.lambda_mut() {
            *m = m.map(|v| 100.0 * v.signum());
        }
        let set = mc_predictive(&s, &sat, None, &x, 8, &mut rng);
        assert!(set.vectors().windows(2).all(|w| w[0] == w[1]));

        let one = mc_predictive(&s, &sat, None, &x, 1, &mut rng);
        assert_eq!(one.k(), 1);
        assert!((one.vectors()[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let flat = BernoulliPosterior::constant(&s.weight_shapes(), 0.0);
        let set = mc_predictive(&s, &flat, None, &x, 100, &mut rng);
        let mut modes: Vec<usize> = set.vectors().iter().map(|v| argmax(v)).collect();
        modes.sort_unstable();
        modes.dedup();
        assert!(modes.len() >= 2);
    }

    #[test]
    fn bias_gradient_matches_finite_difference() {
        let mut s = spec(&[3, 4, 3], Activation::Identity);
        s.bias = true;
        let mut rng = RngStream::new(2, 2);
        let w: Vec<DenseMatrix> = s
            .weight_shapes()
            .iter()
            .map(|&(r, c)| DenseMatrix::from_fn(r, c, |_, _| rng.uniform01() * 2.0 - 1.0))
            .collect();
        let mut b = s.zero_biases();
        b[0][1] = 0.3;
        let x = [0.2, -0.7, 1.1];
        let (logits, tape) = forward(&s, &w, Some(&b), &x);
        let (_, dl) = loss_ce(&logits, 2);
        let (_, db) = backward(&s, &tape, &dl);
        let h = 1e-6;
        for l in 0..2 {
            for i in 0..b[l].len() {
                let mut bp = b.clone();
                bp[l][i] += h;
                let mut bm = b.clone();
                bm[l][i] -= h;
                let lp = loss_ce(&forward(&s, &w, Some(&bp), &x).0, 2).0;
                let lm = loss_ce(&forward(&s, &w, Some(&bm), &x).0, 2).0;
                assert!(((lp - lm) / (2.0 * h) - db[l][i]).abs() < 1e-8);
            }
        }
    }
}
