//! Finite-difference oracle for `∂𝓛/∂λ`, built on a from-scratch forward pass.
//!
//! Hidden units are evaluated straight-through: `hard(z₀) + s(z) − s(z₀)`,
//! with `z₀` frozen at the unperturbed parameters and `s` the surrogate whose
//! derivative is the backward rule. At `z = z₀` this is the real forward
//! pass, and its derivative is the surrogate's.

use bimu_core::binnet::{grad_lambda_with_noise, Activation, NetworkSpec};
use bimu_core::posterior::logistic_noise;
use bimu_core::{BernoulliPosterior, DenseMatrix, RngStream};

/// Forward function whose derivative is the backward rule of `act`.
fn surrogate(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Identity => z,
        Activation::SignHardtanh => z.clamp(-1.0, 1.0),
        Activation::Rbg => {
            let m = z.abs();
            if m < 0.5 * a {
                0.0
            } else if m < 1.5 * a {
                m
            } else {
                1.0
            }
        }
    }
}

fn hard(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Identity => z,
        Activation::SignHardtanh => z.signum(),
        Activation::Rbg => {
            if z.abs() < 0.5 * a {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// Points where the surrogate is not differentiable.
fn kinks(act: Activation, a: f64) -> Vec<f64> {
    match act {
        Activation::Identity => vec![],
        Activation::SignHardtanh => vec![-1.0, 1.0],
        Activation::Rbg => vec![-1.5 * a, -0.5 * a, 0.5 * a, 1.5 * a],
    }
}

struct Oracle<'a> {
    sizes: &'a [usize],
    act: Activation,
    width: f64,
    biases: Option<&'a [Vec<f64>]>,
    x: &'a [f64],
    label: usize,
    temperature: f64,
}

impl Oracle<'_> {
    /// Loss averaged over draws, the smallest distance from any hidden
    /// pre-activation to a kink, and the hidden pre-activations. With
    /// `anchor = None` the pass is the plain hard forward.
    fn loss(
        &self,
        lambda: &[Vec<f64>],
        deltas: &[Vec<Vec<f64>>],
        anchor: Option<&[Vec<Vec<f64>>]>,
    ) -> (f64, f64, Vec<Vec<Vec<f64>>>) {
        let layers = self.sizes.len() - 1;
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        let mut pre = Vec::new();
        for (d, delta) in deltas.iter().enumerate() {
            let mut zs = Vec::new();
            let mut h: Vec<f64> = self.x.to_vec();
            for l in 0..layers {
                let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
                let scale = if l + 1 == layers { 1.0 } else { 1.0 / (cols as f64).sqrt() };
                let mut z = vec![0.0; rows];
                for i in 0..rows {
                    let mut s = 0.0;
                    for j in 0..cols {
                        let idx = i * cols + j;
                        let w = ((lambda[l][idx] + delta[l][idx]) / self.temperature).tanh();
                        s += w * h[j];
                    }
                    z[i] = s * scale + self.biases.map_or(0.0, |b| b[l][i]);
                }
                if l + 1 < layers {
                    for &zi in &z {
                        for k in kinks(self.act, self.width) {
                            margin = margin.min((zi - k).abs());
                        }
                    }
                    let (a, w) = (self.act, self.width);
                    h = match anchor {
                        None => z.iter().map(|&v| hard(a, v, w)).collect(),
                        Some(z0) => z
                            .iter()
                            .zip(&z0[d][l])
                            .map(|(&v, &v0)| hard(a, v0, w) + surrogate(a, v, w) - surrogate(a, v0, w))
                            .collect(),
                    };
                    zs.push(z);
                } else {
                    h = z;
                }
            }
            let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - h[self.label];
            pre.push(zs);
        }
        (total / deltas.len() as f64, margin, pre)
    }
}

fn flat(ms: &[DenseMatrix]) -> Vec<Vec<f64>> {
    ms.iter().map(|m| m.as_slice().to_vec()).collect()
}

fn random_case(
    sizes: &[usize],
    seed: u64,
    draws: usize,
) -> (BernoulliPosterior, Vec<Vec<DenseMatrix>>, Vec<f64>) {
    let shapes: Vec<(usize, usize)> = sizes.windows(2).map(|w| (w[1], w[0])).collect();
    let mut rng = RngStream::new(seed, 1);
    let post = BernoulliPosterior::init_uniform(&shapes, 1.5, &mut rng);
    let deltas = (0..draws)
        .map(|_| {
            shapes
                .iter()
                .map(|&(r, c)| DenseMatrix::from_fn(r, c, |_, _| logistic_noise(rng.uniform01())))
                .collect()
        })
        .collect();
    let x = (0..sizes[0]).map(|_| 4.0 * rng.uniform01() - 2.0).collect();
    (post, deltas, x)
}

/// Returns the worst relative error over all entries (or the worst absolute
/// error divided by 1e-7 for tiny gradients, so both bounds map to `< 1`).
pub fn check(act: Activation, sizes: &[usize], with_bias: bool, temperature: f64, draws: usize) -> f64 {
    let h = 1e-5;
    let spec = NetworkSpec {
        bias: with_bias,
        ..NetworkSpec::new(sizes.to_vec(), act).unwrap()
    };
    // Seeds whose hidden pre-activations sit too close to a kink for a
    // central difference are skipped; the search itself is deterministic.
    for seed in 1..200u64 {
        let (post, deltas, x) = random_case(sizes, seed, draws);
        let biases: Option<Vec<Vec<f64>>> = with_bias.then(|| {
            let mut r = RngStream::new(seed, 2);
            sizes[1..].iter().map(|&n| (0..n).map(|_| r.uniform01() - 0.5).collect()).collect()
        });
        let label = (seed as usize) % sizes[sizes.len() - 1];
        let oracle = Oracle {
            sizes,
            act,
            width: spec.rbg_width,
            biases: biases.as_deref(),
            x: &x,
            label,
            temperature,
        };
        let lambda = flat(post.lambda());
        let noise: Vec<Vec<Vec<f64>>> = deltas.iter().map(|d| flat(d)).collect();
        let (exact, margin, z0) = oracle.loss(&lambda, &noise, None);
        if margin < 1e-3 {
            continue;
        }
        let grad = grad_lambda_with_noise(&spec, &post, biases.as_deref(), &x, label, &deltas, temperature);
        assert!((grad.loss - exact).abs() < 1e-12, "loss {} vs oracle {}", grad.loss, exact);
        let mut worst: f64 = 0.0;
        for l in 0..lambda.len() {
            for i in 0..lambda[l].len() {
                let mut plus = lambda.clone();
                plus[l][i] += h;
                let mut minus = lambda.clone();
                minus[l][i] -= h;
                let fd = (oracle.loss(&plus, &noise, Some(&z0)).0 - oracle.loss(&minus, &noise, Some(&z0)).0) / (2.0 * h);
                let an = grad.lambda[l].as_slice()[i];
                let err = if fd.abs().max(an.abs()) < 1e-5 {
                    (fd - an).abs() / 1e-7
                } else {
                    (fd - an).abs() / fd.abs().max(an.abs()) / 1e-4
                };
                worst = worst.max(err);
            }
        }
        return worst;
    }
    panic!("no seed with kink-free pre-activations");
}
