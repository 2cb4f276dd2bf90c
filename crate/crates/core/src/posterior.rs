//! Mean-field Bernoulli posterior over signed binary weights.
//!
//! Each synapse `ω ∈ {-1, +1}` carries a natural parameter `λ` with
//! `q(ω | λ) = exp(λω) / (2 cosh λ)`, so `p(ω = +1) = σ(2λ)`. The state is
//! stored as one `λ` matrix per layer (shape `out × in`) plus a matching
//! prior. `λ = 0` is the maximally uncertain synapse.
//!
//! Checkpoints use a small binary layout: ASCII `BIMU`, `u32` format
//! version, `u32` layer count, then per layer `u32` rows, `u32` cols, the
//! `λ` entries and the prior entries as little-endian `f64`. All integers
//! are little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::numkit::{log_cosh, sigmoid, DenseMatrix, RngStream};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BIMU";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Default half-width of the uniform `λ` initialization.
pub const DEFAULT_INIT_RADIUS: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("layer {layer}: lambda is {lambda:?} but prior is {prior:?}")]
    ShapeMismatch {
        layer: usize,
        lambda: (usize, usize),
        prior: (usize, usize),
    },
    #[error("layer {layer}: non-finite natural parameter")]
    NonFinite { layer: usize },
    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliPosterior {
    lambda: Vec<DenseMatrix>,
    lambda_prior: Vec<DenseMatrix>,
}

/// A Concrete-relaxed weight draw: `ω = tanh((λ + δ) / T)` with logistic
/// noise `δ = ½ (log ε − log(1 − ε))`, `ε ~ U(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSample {
    pub omega: Vec<DenseMatrix>,
    pub delta: Vec<DenseMatrix>,
    pub temperature: f64,
}

impl RelaxedSample {
    /// Rebuilds the relaxed weights for fixed noise.
    pub fn from_noise(lambda: &[DenseMatrix], delta: Vec<DenseMatrix>, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        assert_eq!(lambda.len(), delta.len());
        let omega = lambda
            .iter()
            .zip(&delta)
            .map(|(l, d)| l.zip_map(d, |l, d| ((l + d) / temperature).tanh()))
            .collect();
        Self {
            omega,
            delta,
            temperature,
        }
    }
}

/// Logistic noise from a uniform draw.
#[inline]
pub fn logistic_noise(eps: f64) -> f64 {
    0.5 * (eps.ln() - (1.0 - eps).ln())
}

impl BernoulliPosterior {
    pub fn new(
        lambda: Vec<DenseMatrix>,
        lambda_prior: Vec<DenseMatrix>,
    ) -> Result<Self, PosteriorError> {
        if lambda.len() != lambda_prior.len() {
            return Err(PosteriorError::ShapeMismatch {
                layer: lambda.len().min(lambda_prior.len()),
                lambda: (lambda.len(), 0),
                prior: (lambda_prior.len(), 0),
            });
        }
        for (layer, (l, p)) in lambda.iter().zip(&lambda_prior).enumerate() {
            if l.shape() != p.shape() {
                return Err(PosteriorError::ShapeMismatch {
                    layer,
                    lambda: l.shape(),
                    prior: p.shape(),
                });
            }
            if !l.all_finite() || !p.all_finite() {
                return Err(PosteriorError::NonFinite { layer });
            }
        }
        Ok(Self {
            lambda,
            lambda_prior,
        })
    }

    /// `λ ~ U[-radius, radius]` i.i.d., zero prior.
    pub fn init_uniform(shapes: &[(usize, usize)], radius: f64, rng: &mut RngStream) -> Self {
        let lambda = shapes
            .iter()
            .map(|&(r, c)| DenseMatrix::from_fn(r, c, |_, _| radius * (2.0 * rng.uniform01() - 1.0)))
            .collect();
        let lambda_prior = shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
        Self {
            lambda,
            lambda_prior,
        }
    }

    /// Posterior with every `λ` equal to `value` and a zero prior.
    pub fn constant(shapes: &[(usize, usize)], value: f64) -> Self {
        Self {
            lambda: shapes.iter().map(|&(r, c)| DenseMatrix::filled(r, c, value)).collect(),
            lambda_prior: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    pub fn lambda(&self) -> &[DenseMatrix] {
        &self.lambda
    }

    pub fn lambda_prior(&self) -> &[DenseMatrix] {
        &self.lambda_prior
    }

    pub(crate) fn lambda_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.lambda
    }

    pub fn num_layers(&self) -> usize {
        self.lambda.len()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.lambda.iter().map(DenseMatrix::shape).collect()
    }

    /// Total synapse count `s`.
    pub fn synapse_count(&self) -> usize {
        self.lambda.iter().map(DenseMatrix::len).sum()
    }

    pub fn all_lambda(&self) -> impl Iterator<Item = f64> + '_ {
        self.lambda.iter().flat_map(|m| m.as_slice().iter().copied())
    }

    /// `p(ω = +1) = σ(2λ)` per synapse.
    pub fn probability(&self) -> Vec<DenseMatrix> {
        self.lambda.iter().map(|l| l.map(|v| sigmoid(2.0 * v))).collect()
    }

    /// `Var_q(ω) = 1 − tanh²(λ)`.
    pub fn variance(&self) -> Vec<DenseMatrix> {
        self.lambda
            .iter()
            .map(|l| {
                l.map(|v| {
                    let t = v.tanh();
                    1.0 - t * t
                })
            })
            .collect()
    }

    /// Draws hard weights in `{-1, +1}`, `+1` with probability `σ(2λ)`.
    pub fn sample_hard(&self, rng: &mut RngStream) -> Vec<DenseMatrix> {
        let probs = self.probability();
        sample_hard_from_probability(&probs, rng)
    }

    /// Draws one Concrete-relaxed weight set at temperature `T`.
    pub fn sample_relaxed(&self, temperature: f64, rng: &mut RngStream) -> RelaxedSample {
        assert!(temperature > 0.0, "temperature must be positive");
        let mut fast = rng.fast();
        let delta: Vec<DenseMatrix> = self
            .lambda
            .iter()
            .map(|l| DenseMatrix::from_fn(l.rows(), l.cols(), |_, _| logistic_noise(fast.uniform01())))
            .collect();
        RelaxedSample::from_noise(&self.lambda, delta, temperature)
    }

    /// Counts synaptic probabilities `σ(2λ)` into `bins` uniform bins on `[0, 1]`.
    pub fn probability_histogram(&self, bins: usize) -> Vec<usize> {
        assert!(bins >= 2, "histogram needs at least two bins");
        let mut counts = vec![0usize; bins];
        for l in self.all_lambda() {
            let p = sigmoid(2.0 * l);
            let idx = ((p * bins as f64) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        counts
    }

    /// Fraction of synapses with `|p − ½| > margin`.
    pub fn saturated_fraction(&self, margin: f64) -> f64 {
        let n = self.synapse_count();
        if n == 0 {
            return 0.0;
        }
        let sat = self
            .all_lambda()
            .filter(|&l| (sigmoid(2.0 * l) - 0.5).abs() > margin)
            .count();
        sat as f64 / n as f64
    }

    pub fn mean_abs_lambda(&self) -> f64 {
        let n = self.synapse_count().max(1);
        self.all_lambda().map(f64::abs).sum::<f64>() / n as f64
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PosteriorError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.lambda.len() as u32).to_le_bytes())?;
        for (l, p) in self.lambda.iter().zip(&self.lambda_prior) {
            w.write_all(&(l.rows() as u32).to_le_bytes())?;
            w.write_all(&(l.cols() as u32).to_le_bytes())?;
            for m in [l, p] {
                let mut buf = Vec::with_capacity(m.len() * 8);
                for v in m.as_slice() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, PosteriorError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PosteriorError::BadMagic(magic));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(PosteriorError::UnsupportedVersion(version));
        }
        let layers = read_u32(&mut r)? as usize;
        let mut lambda = Vec::with_capacity(layers);
        let mut prior = Vec::with_capacity(layers);
        for _ in 0..layers {
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            lambda.push(read_matrix(&mut r, rows, cols)?);
            prior.push(read_matrix(&mut r, rows, cols)?);
        }
        Self::new(lambda, prior)
    }
}

pub(crate) fn sample_hard_from_probability(
    probs: &[DenseMatrix],
    rng: &mut RngStream,
) -> Vec<DenseMatrix> {
    let mut fast = rng.fast();
    probs
        .iter()
        .map(|p| p.map(|pi| if fast.uniform01() < pi { 1.0 } else { -1.0 }))
        .collect()
}

/// Closed-form `KL(q(·|θ) ‖ q(·|ξ))` between two signed Bernoulli laws:
/// `(θ − ξ) tanh θ − log cosh θ + log cosh ξ`.
pub fn kl_bernoulli(theta: f64, xi: f64) -> f64 {
    let kl = (theta - xi) * theta.tanh() - log_cosh(theta) + log_cosh(xi);
    // Roundoff can leave a tiny negative value when θ ≈ ξ.
    kl.max(0.0)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), PosteriorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => PosteriorError::Truncated,
        _ => PosteriorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PosteriorError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DenseMatrix, PosteriorError> {
    let mut bytes = vec![0u8; rows * cols * 8];
    read_exact(r, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DenseMatrix::from_vec(rows, cols, data))
}
