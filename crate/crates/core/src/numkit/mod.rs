//! Numeric substrate shared by every other module: dense matrices, seeded
//! random streams and a handful of numerically stable scalar kernels.
//!
//! All training math runs in `f64`.

mod matrix;
mod rng;

pub use matrix::{dot, DenseMatrix};
pub use rng::{derive_stream_id, FastStream, RngStream};

/// `log(sum(exp(v)))` without overflow.
///
/// Panics on empty input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "log_sum_exp of an empty vector");
    let top = argmax(v);
    let max = v[top];
    if max == f64::NEG_INFINITY {
        return max;
    }
    let rest: f64 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Writes `softmax(logits)` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    assert_eq!(logits.len(), out.len());
    let lse = log_sum_exp(logits);
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - lse).exp();
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(cosh(x))`, finite for every finite `x`.
#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (0.5 * (1.0 + (-2.0 * a).exp())).ln()
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `tanh` as `1 − 2/(e^{2x} + 1)`: one `exp` and one division, with absolute
/// error of a few ulp of 1 (relative accuracy is lost only near zero).
#[inline]
pub fn tanh_fast(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
