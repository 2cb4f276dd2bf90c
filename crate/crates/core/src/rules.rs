//! Online update rules.
//!
//! * BiMU: metaplastic step on the natural parameters with a prior
//!   relaxation term whose strength is set by the memory window `N`.
//! * Cumulative: plain gradient step on `λ` with no forgetting.
//! * STE: latent real weights, `sign` forward, Adam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binnet::{backward, forward, loss_ce, Activation, LossGradient, NetworkSpec};
use crate::numkit::{sign0, tanh_fast, DenseMatrix, RngStream};
use crate::posterior::BernoulliPosterior;

#[derive(Debug, Error, PartialEq)]
pub enum RuleError {
    #[error("non-finite gradient at layer {layer}, index {index}")]
    NonFiniteGradient { layer: usize, index: usize },
    #[error("gradient shape {got:?} does not match parameters {expected:?}")]
    ShapeMismatch {
        expected: Vec<(usize, usize)>,
        got: Vec<(usize, usize)>,
    },
    #[error("invalid hyperparameter {name} = {value}")]
    BadHyperparameter { name: &'static str, value: f64 },
    #[error("STE requires the sign activation")]
    SteNeedsSign,
}

/// Update rule selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bimu,
    Cumulative,
    Ste,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bimu => "bimu",
            Method::Cumulative => "cumulative",
            Method::Ste => "ste",
        }
    }

    /// Persistent 32-bit words per parameter during training.
    pub fn state_width(self) -> usize {
        match self {
            Method::Bimu => 1,
            Method::Cumulative => 2,
            Method::Ste => 3,
        }
    }

    pub fn is_bayesian(self) -> bool {
        self != Method::Ste
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiMUConfig {
    pub n: f64,
    pub alpha_max: f64,
    pub beta_l: f64,
    pub beta_kl: f64,
    pub gamma_grad: f64,
    pub k: usize,
    pub temperature: f64,
}

impl BiMUConfig {
    /// Permuted-MNIST preset.
    pub fn pmnist() -> Self {
        Self {
            n: 700.0,
            alpha_max: 0.0023,
            beta_l: 161.3,
            beta_kl: 3.76,
            gamma_grad: 4.9,
            k: 5,
            temperature: crate::binnet::DEFAULT_TEMPERATURE,
        }
    }

    /// Preset tuned for the class-incremental feature streams.
    pub fn animals() -> Self {
        Self {
            n: 4600.0,
            alpha_max: 0.054,
            beta_l: 14.0,
            beta_kl: 0.16,
            gamma_grad: 5.8,
            k: 10,
            temperature: crate::binnet::DEFAULT_TEMPERATURE,
        }
    }

    /// All scalings at 1: the unscaled update.
    pub fn unscaled(n: f64, alpha_max: f64) -> Self {
        Self {
            n,
            alpha_max,
            beta_l: 1.0,
            beta_kl: 1.0,
            gamma_grad: 1.0,
            k: 1,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        let checks = [
            ("alpha_max", self.alpha_max),
            ("beta_l", self.beta_l),
            ("beta_kl", self.beta_kl),
            ("gamma_grad", self.gamma_grad),
            ("temperature", self.temperature),
        ];
        for (name, value) in checks {
            if !(value > 0.0 && value.is_finite()) {
                return Err(RuleError::BadHyperparameter { name, value });
            }
        }
        if !(self.n >= 1.0 && self.n.is_finite()) {
            return Err(RuleError::BadHyperparameter {
                name: "n",
                value: self.n,
            });
        }
        if self.k == 0 {
            return Err(RuleError::BadHyperparameter { name: "k", value: 0.0 });
        }
        Ok(())
    }
}

impl Default for BiMUConfig {
    fn default() -> Self {
        Self::pmnist()
    }
}

/// Scalar metaplastic step size.
#[inline]
pub fn bimu_eta_scalar(lambda: f64, g: f64, cfg: &BiMUConfig) -> f64 {
    eta_from_tanh(tanh_fast(lambda), g, cfg)
}

#[inline]
fn eta_from_tanh(t: f64, g: f64, cfg: &BiMUConfig) -> f64 {
    let inv = cfg.beta_kl * (1.0 - t * t)
        + 2.0 * cfg.beta_l * t * g
        + 2.0 * cfg.beta_l * g.abs()
        + 1.0 / cfg.alpha_max;
    // 1/(1/α) can round one ulp above α at saturation.
    (1.0 / inv).min(cfg.alpha_max)
}

/// Entrywise metaplastic step sizes; every entry lies in `(0, α_max]`.
pub fn bimu_eta(lambda_prev: &DenseMatrix, g: &DenseMatrix, cfg: &BiMUConfig) -> DenseMatrix {
    assert_eq!(lambda_prev.shape(), g.shape(), "shape mismatch");
    lambda_prev.zip_map(g, |l, gi| bimu_eta_scalar(l, gi, cfg))
}

fn check_grad(post: &BernoulliPosterior, grad: &[DenseMatrix]) -> Result<(), RuleError> {
    let expected = post.shapes();
    let got: Vec<_> = grad.iter().map(DenseMatrix::shape).collect();
    if expected != got {
        return Err(RuleError::ShapeMismatch { expected, got });
    }
    for (layer, g) in grad.iter().enumerate() {
        if let Some(index) = g.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(RuleError::NonFiniteGradient { layer, index });
        }
    }
    Ok(())
}

/// `λ ← λ − η(λ) ⊙ [γ β_L g + (β_KL/N)(λ − λ_prior)(1 − tanh² λ)]`.
///
/// The posterior is untouched when the gradient has a non-finite entry.
pub fn bimu_step(
    post: &mut BernoulliPosterior,
    grad: &LossGradient,
    cfg: &BiMUConfig,
) -> Result<(), RuleError> {
    check_grad(post, &grad.lambda)?;
    let priors = post.lambda_prior().to_vec();
    let relax = cfg.beta_kl / cfg.n;
    for ((lam, prior), g) in post.lambda_mut().iter_mut().zip(&priors).zip(&grad.lambda) {
        for ((l, &p), &gi) in lam
            .as_mut_slice()
            .iter_mut()
            .zip(prior.as_slice())
            .zip(g.as_slice())
        {
            let t = tanh_fast(*l);
            let sech2 = 1.0 - t * t;
            let eta = eta_from_tanh(t, gi, cfg);
            *l -= eta * (cfg.gamma_grad * cfg.beta_l * gi + relax * (*l - p) * sech2);
        }
    }
    Ok(())
}

/// `λ ← λ − lr · g`.
pub fn cumulative_step(
    post: &mut BernoulliPosterior,
    grad: &LossGradient,
    lr: f64,
) -> Result<(), RuleError> {
    check_grad(post, &grad.lambda)?;
    for (lam, g) in post.lambda_mut().iter_mut().zip(&grad.lambda) {
        for (l, &gi) in lam.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *l -= lr * gi;
        }
    }
    Ok(())
}

/// Default cumulative-mode learning rate.
pub const DEFAULT_CUMULATIVE_LR: f64 = 0.77;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Half-width of the uniform latent initialization.
    pub init_radius: f64,
}

impl Default for SteConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 2.2e-9,
            init_radius: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct STEState {
    pub latent: Vec<DenseMatrix>,
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl STEState {
    pub fn new(latent: Vec<DenseMatrix>, lr: f64, weight_decay: f64) -> Self {
        let zeros = |w: &DenseMatrix| DenseMatrix::zeros(w.rows(), w.cols());
        Self {
            m: latent.iter().map(zeros).collect(),
            v: latent.iter().map(zeros).collect(),
            latent: latent
                .into_iter()
                .map(|w| w.map(|x| x.clamp(-1.0, 1.0)))
                .collect(),
            step: 0,
            lr,
            weight_decay,
        }
    }

    pub fn init_uniform(spec: &NetworkSpec, cfg: &SteConfig, rng: &mut RngStream) -> Self {
        let latent = spec
            .weight_shapes()
            .iter()
            .map(|&(r, c)| {
                DenseMatrix::from_fn(r, c, |_, _| (2.0 * rng.uniform01() - 1.0) * cfg.init_radius)
            })
            .collect();
        Self::new(latent, cfg.lr, cfg.weight_decay)
    }

    /// Binarized weights `sign(latent)`.
    pub fn binary_weights(&self) -> Vec<DenseMatrix> {
        self.latent.iter().map(|w| w.map(sign0)).collect()
    }

    /// One Adam step on an externally computed latent-weight gradient.
    /// Weight decay is added to the gradient before the moments.
    pub fn adam_update(&mut self, grad: &[DenseMatrix]) -> Result<(), RuleError> {
        for (layer, g) in grad.iter().enumerate() {
            if let Some(index) = g.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(RuleError::NonFiniteGradient { layer, index });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for l in 0..self.latent.len() {
            let w = self.latent[l].as_mut_slice();
            let m = self.m[l].as_mut_slice();
            let v = self.v[l].as_mut_slice();
            for (((wi, mi), vi), &gi) in w.iter_mut().zip(m).zip(v).zip(grad[l].as_slice()) {
                let g = gi + self.weight_decay * *wi;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi = (*wi - self.lr * mhat / (vhat.sqrt() + ADAM_EPS)).clamp(-1.0, 1.0);
            }
        }
        Ok(())
    }
}

/// One STE training step on `(x, label)`; returns the loss.
///
/// Gradients w.r.t. the binarized weights reach the latent weights only
/// where `|latent| ≤ 1`.
pub fn ste_step(
    state: &mut STEState,
    x: &[f64],
    label: usize,
    spec: &NetworkSpec,
    biases: Option<&[Vec<f64>]>,
) -> Result<f64, RuleError> {
    if spec.activation != Activation::SignHardtanh {
        return Err(RuleError::SteNeedsSign);
    }
    let w = state.binary_weights();
    let (logits, tape) = forward(spec, &w, biases, x);
    let (loss, dlogits) = loss_ce(&logits, label);
    let (mut grads, _) = backward(spec, &tape, &dlogits);
    for (g, lat) in grads.iter_mut().zip(&state.latent) {
        for (gi, &li) in g.as_mut_slice().iter_mut().zip(lat.as_slice()) {
            if li.abs() > 1.0 {
                *gi = 0.0;
            }
        }
    }
    state.adam_update(&grads)?;
    Ok(loss)
}

/// Persistent training-state size in bytes (32-bit words).
pub fn training_state_bytes(method: Method, spec: &NetworkSpec) -> u64 {
    (spec.parameter_count() * method.state_width() * 4) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(v: f64) -> DenseMatrix {
        DenseMatrix::filled(1, 1, v)
    }

    fn grad(v: f64) -> LossGradient {
        LossGradient {
            lambda: vec![one(v)],
            bias: None,
            loss: 0.0,
        }
    }

    fn post(lambda: f64, prior: f64) -> BernoulliPosterior {
        BernoulliPosterior::new(vec![one(lambda)], vec![one(prior)]).unwrap()
    }

    #[test]
    fn eta_examples() {
        let cfg = BiMUConfig::unscaled(100.0, 1.0);
        assert!((bimu_eta_scalar(0.0, 0.0, &cfg) - 0.5).abs() < 1e-15);
        assert!((bimu_eta_scalar(40.0, 0.0, &cfg) - 1.0).abs() < 1e-15);
        let a = bimu_eta_scalar(1.0, 0.1, &cfg);
        let b = bimu_eta_scalar(1.0, -0.1, &cfg);
        // Oracle: 1/(sech²1 + 0.2 tanh 1 + 0.2 + 1) and 1/(sech²1 − 0.2 tanh 1 + 0.2 + 1).
        assert!((a - 0.564_240_733_6).abs() < 1e-9);
        assert!((b - 0.681_358_801_8).abs() < 1e-9);
        let m = bimu_eta(&one(1.0), &one(0.1), &cfg);
        assert_eq!(m.get(0, 0), a);
    }

    #[test]
    fn step_examples() {
        let cfg = BiMUConfig::unscaled(100.0, 1.0);
        let mut p = post(0.3, 0.3);
        bimu_step(&mut p, &grad(0.0), &cfg).unwrap();
        assert_eq!(p.lambda()[0].get(0, 0), 0.3);

        let mut p = post(2.0, -1.0);
        bimu_step(&mut p, &grad(0.0), &cfg).unwrap();
        let l = p.lambda()[0].get(0, 0);
        assert!(l < 2.0 && l > -1.0);

        let mut p = post(1.0, 0.0);
        bimu_step(&mut p, &grad(0.1), &cfg).unwrap();
        assert!((p.lambda()[0].get(0, 0) - 0.941_206_3).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let cfg = BiMUConfig::pmnist();
        let mut p = post(0.5, 0.0);
        let err = bimu_step(&mut p, &grad(f64::NAN), &cfg).unwrap_err();
        assert_eq!(err, RuleError::NonFiniteGradient { layer: 0, index: 0 });
        assert_eq!(p.lambda()[0].get(0, 0), 0.5);
        assert!(cumulative_step(&mut p, &grad(f64::INFINITY), 1.0).is_err());
    }

    #[test]
    fn cumulative_grows_linearly() {
        let mut p = post(0.0, 0.0);
        cumulative_step(&mut p, &grad(0.0), 1.0).unwrap();
        assert_eq!(p.lambda()[0].get(0, 0), 0.0);
        for _ in 0..1000 {
            cumulative_step(&mut p, &grad(-0.1), 1.0).unwrap();
        }
        assert!((p.lambda()[0].get(0, 0) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bimu_converges_under_constant_drive() {
        let cfg = BiMUConfig::unscaled(100.0, 1.0);
        // A fixed point exists while |g| < max_λ λ sech²λ / N ≈ 0.448 / N.
        let mut p = post(0.0, 0.0);
        let g = grad(-1e-3);
        let mut converged = false;
        for _ in 0..1_000_000 {
            let before = p.lambda()[0].get(0, 0);
            bimu_step(&mut p, &g, &cfg).unwrap();
            if (p.lambda()[0].get(0, 0) - before).abs() < 1e-9 {
                converged = true;
                break;
            }
        }
        assert!(converged);
        assert!(p.lambda()[0].get(0, 0).is_finite());
        let mut c = post(0.0, 0.0);
        for _ in 0..10_000 {
            cumulative_step(&mut c, &g, 1.0).unwrap();
        }
        assert!((c.lambda()[0].get(0, 0) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn relaxation_gating() {
        let term = |l: f64| l.abs() * (1.0 - l.tanh().powi(2)) / 100.0;
        assert!(term(10.0) < 1e-6 * term(1.0));
    }

    #[test]
    fn reduces_to_unscaled_rule() {
        let cfg = BiMUConfig::unscaled(37.0, 0.2);
        let mut rng = RngStream::new(4, 4);
        for _ in 0..1000 {
            let l = rng.uniform01() * 10.0 - 5.0;
            let pr = rng.uniform01() * 2.0 - 1.0;
            let g = rng.uniform01() * 4.0 - 2.0;
            let mut p = post(l, pr);
            bimu_step(&mut p, &grad(g), &cfg).unwrap();
            let sech2 = 1.0 / l.cosh().powi(2);
            let eta = 1.0 / (sech2 + 2.0 * l.tanh() * g + 2.0 * g.abs() + 1.0 / 0.2);
            let direct = l - eta * (g + (l - pr) * sech2 / 37.0);
            assert!((p.lambda()[0].get(0, 0) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn ste_clip_and_mask() {
        let mut s = STEState::new(vec![one(1.0)], 0.1, 0.0);
        s.adam_update(&[one(-1.0)]).unwrap();
        assert_eq!(s.latent[0].get(0, 0), 1.0);

        let mut s = STEState::new(vec![one(0.0)], 0.1, 0.0);
        s.adam_update(&[one(1.0)]).unwrap();
        assert!((s.latent[0].get(0, 0) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn ste_step_runs_and_rejects_rbg() {
        let spec = NetworkSpec::new(vec![4, 3, 2], Activation::SignHardtanh).unwrap();
        let mut rng = RngStream::new(1, 1);
        let mut s = STEState::init_uniform(&spec, &SteConfig::default(), &mut rng);
        let loss = ste_step(&mut s, &[0.1, -0.2, 0.3, 0.4], 1, &spec, None).unwrap();
        assert!(loss >= 0.0);
        assert_eq!(s.step, 1);
        assert!(s.latent.iter().all(|w| w.as_slice().iter().all(|v| v.abs() <= 1.0)));
        let rbg = NetworkSpec::new(vec![4, 3, 2], Activation::Rbg).unwrap();
        assert_eq!(
            ste_step(&mut s, &[0.0; 4], 0, &rbg, None),
            Err(RuleError::SteNeedsSign)
        );
    }

    #[test]
    fn memory_table() {
        let spec = NetworkSpec::new(vec![784, 100, 10], Activation::Rbg).unwrap();
        assert_eq!(training_state_bytes(Method::Bimu, &spec), 317_600);
        assert_eq!(training_state_bytes(Method::Cumulative, &spec), 635_200);
        assert_eq!(training_state_bytes(Method::Ste, &spec), 952_800);
    }

    proptest! {
        #[test]
        fn eta_bounded(l in -30.0f64..30.0, g in -100.0f64..100.0,
                       bl in 1e-3f64..1e3, bk in 1e-3f64..1e3, a in 1e-4f64..10.0) {
            let cfg = BiMUConfig { beta_l: bl, beta_kl: bk, alpha_max: a, ..BiMUConfig::pmnist() };
            let eta = bimu_eta_scalar(l, g, &cfg);
            prop_assert!(eta > 0.0 && eta <= a);
        }

        #[test]
        fn eta_asymmetry(l in 1e-3f64..30.0, g in 1e-3f64..100.0) {
            let cfg = BiMUConfig::pmnist();
            prop_assert!(bimu_eta_scalar(l, -g, &cfg) >= bimu_eta_scalar(l, g, &cfg));
            prop_assert!(bimu_eta_scalar(-l, g, &cfg) >= bimu_eta_scalar(-l, -g, &cfg));
        }
    }
}
