//! Fixtures shared by the benchmarks.

use bimu_core::{Activation, BernoulliPosterior, NetworkSpec, RngStream};

/// The 784-100-10 RBG network used for Permuted MNIST.
pub fn mnist_spec() -> NetworkSpec {
    NetworkSpec::new(vec![784, 100, 10], Activation::Rbg).expect("valid spec")
}

/// Posterior with `λ ~ U(−radius, radius)`.
pub fn random_posterior(spec: &NetworkSpec, radius: f64, seed: u64) -> BernoulliPosterior {
    let mut rng = RngStream::new(seed, 0);
    BernoulliPosterior::init_uniform(&spec.weight_shapes(), radius, &mut rng)
}

/// Standard-normal-ish input vector.
pub fn random_input(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 1);
    (0..dim).map(|_| 2.0 * rng.uniform01() - 1.0).collect()
}
