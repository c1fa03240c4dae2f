//! Seeded synthetic tensors used by the experiments, the CLI and the tests.
//!
//! Every generator is a pure function of its arguments: the same seed always
//! yields bit-identical output (ChaCha8 stream).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Mean of the GeLU pre-activation. With unit spread, about 2.4% of
/// the outputs end up positive and the rest fall in `[-0.17, 0]`.
pub const GELU_PRE_MEAN: f64 = -2.0;
pub const GELU_PRE_STD: f64 = 1.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gaussian(rows: usize, cols: usize, sigma: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = r.sample(StandardNormal);
        sigma * z
    })
}

/// Zero-mean Gaussian weight matrix whose per-row standard deviation is
/// drawn uniformly from `sigma_range`.
pub fn gaussian_weights(
    rows: usize,
    cols: usize,
    sigma_range: (f64, f64),
    seed: u64,
) -> Array2<f64> {
    let mut r = rng(seed);
    let sigmas: Vec<f64> = (0..rows)
        .map(|_| r.random_range(sigma_range.0..=sigma_range.1))
        .collect();
    let mut w = Array2::zeros((rows, cols));
    for (i, mut row) in w.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            let z: f64 = r.sample(StandardNormal);
            *v = sigmas[i] * z;
        }
    }
    w
}

/// GeLU outputs of Gaussian pre-activations: a dense negative bump in
/// `[-0.17, 0]` plus a sparse positive tail.
pub fn gelu_activations(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let pre = Normal::new(GELU_PRE_MEAN, GELU_PRE_STD).expect("valid normal");
    Array2::from_shape_simple_fn((rows, cols), || gelu(pre.sample(&mut r)))
}
