//! Seeded parameter initialization.
//!
//! Values are drawn in `f64` and then rounded, so an `f32` model and an
//! `f64` model built from the same seed agree to `f32` precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type InitRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<S: Scalar>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut InitRng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        S::lit(z * std)
    })
}

pub fn uniform<S: Scalar>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut InitRng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.random_range(lo..hi)))
}

/// `[d_out, d_in]` weight, uniform in ±1/√d_in.
pub fn linear_weight<S: Scalar>(d_out: usize, d_in: usize, rng: &mut InitRng) -> Tensor<S> {
    let bound = 1.0 / (d_in as f64).sqrt();
    uniform(vec![d_out, d_in], -bound, bound, rng)
}

/// `[c_out, c_in, k, k]` kernel, uniform in ±1/√(c_in·k²).
pub fn conv_weight<S: Scalar>(c_out: usize, c_in: usize, k: usize, rng: &mut InitRng) -> Tensor<S> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    uniform(vec![c_out, c_in, k, k], -bound, bound, rng)
}

/// Kernel that copies each channel through unchanged (`[c, c, k, k]`,
/// or `[c, 1, k, k]` when depthwise).
pub fn identity_kernel<S: Scalar>(channels: usize, k: usize, depthwise: bool) -> Tensor<S> {
    let per = if depthwise { 1 } else { channels };
    let mid = k / 2;
    Tensor::from_fn(vec![channels, per, k, k], |i| {
        let kx = i % k;
        let ky = (i / k) % k;
        let ci = (i / (k * k)) % per;
        let co = i / (k * k * per);
        let on = ky == mid && kx == mid && (depthwise || ci == co);
        if on { S::one() } else { S::zero() }
    })
}
