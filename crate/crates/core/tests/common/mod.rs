#![allow(dead_code)]

use lfsamba::init::{randn, rng, uniform, InitRng};
use lfsamba::ssm::SsmBlockParams;
use lfsamba::Tensor64 as T;

pub fn t(shape: &[usize], v: &[f64]) -> T {
    T::from_f64(shape.to_vec(), v).unwrap()
}

/// S6 parameters with every field randomized, including `A` and `D`.
pub fn random_block(d: usize, n: usize, r: &mut InitRng) -> SsmBlockParams<f64> {
    let mut p = SsmBlockParams::init(d, n, r);
    p.a_log = uniform(vec![d, n], -1.0, 1.0, r);
    p.dt_bias = uniform(vec![d], -2.0, 0.5, r);
    p.d_skip = randn(vec![d], 1.0, r);
    p
}

/// Fixed random weighting so a tensor-valued function becomes a scalar.
pub fn probe(shape: &[usize], seed: u64) -> T {
    randn(shape.to_vec(), 1.0, &mut rng(seed))
}

pub fn weighted_sum(y: &T, w: &T) -> lfsamba::Result<T> {
    Ok(y.mul(w)?.sum())
}

pub fn max_rel_diff(a: &T, b: &T) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.max_abs().max(1e-300);
    a.max_abs_diff(b).expect("same shape") / scale
}
