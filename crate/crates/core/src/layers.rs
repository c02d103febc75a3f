//! Small parameterized layers shared by the fusion blocks and the model.

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::params::{visit_leaves, Module, Visitor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// `[d, h, w]` feature map to `[h·w, d]` tokens.
pub fn to_tokens<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    match x.shape() {
        [d, h, w] => x.reshape(vec![*d, h * w])?.permute(&[1, 0]),
        s => Err(Error::dim("to_tokens", format!("expected [d, h, w], got {s:?}"))),
    }
}

/// `[h·w, d]` tokens back to a `[d, h, w]` feature map.
pub fn from_tokens<S: Scalar>(t: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    match t.shape() {
        [l, d] if *l == h * w => t.permute(&[1, 0])?.reshape(vec![*d, h, w]),
        s => Err(Error::dim("from_tokens", format!("{s:?} is not [{h}·{w}, d]"))),
    }
}

#[derive(Clone, Debug)]
pub struct Linear<S: Scalar> {
    /// `[d_out, d_in]`
    pub w: Tensor<S>,
    /// `[d_out]`
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(d_out: usize, d_in: usize, rng: &mut InitRng) -> Self {
        let w = init::linear_weight(d_out, d_in, rng);
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear { w, b: init::uniform(vec![d_out], -bound, bound, rng) }
    }

    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        Linear { w: Tensor::zeros(vec![d_out, d_in]), b: Tensor::zeros(vec![d_out]) }
    }

    pub fn identity(d: usize) -> Self {
        Linear {
            w: Tensor::from_fn(vec![d, d], |i| if i / d == i % d { S::one() } else { S::zero() }),
            b: Tensor::zeros(vec![d]),
        }
    }

    /// Over the last axis.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.linear(&self.w, Some(&self.b))
    }

    /// Per pixel over the channel axis of a `[d, h, w]` map.
    pub fn apply_channels(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        from_tokens(&self.apply(&to_tokens(x)?)?, h, w)
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        visit_leaves(prefix, &mut [("w", &mut self.w), ("b", &mut self.b)], f)
    }
}

/// Same-size convolution with odd kernel `k` and padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv<S: Scalar> {
    /// `[c_out, c_in, k, k]`, or `[c, 1, k, k]` when depthwise.
    pub w: Tensor<S>,
    /// `[c_out]`
    pub b: Tensor<S>,
    pub depthwise: bool,
}

impl<S: Scalar> Conv<S> {
    pub fn init(c_out: usize, c_in: usize, k: usize, rng: &mut InitRng) -> Self {
        let w = init::conv_weight(c_out, c_in, k, rng);
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Conv { w, b: init::uniform(vec![c_out], -bound, bound, rng), depthwise: false }
    }

    pub fn init_depthwise(c: usize, k: usize, rng: &mut InitRng) -> Self {
        Conv { depthwise: true, ..Self::init(c, 1, k, rng) }
    }

    pub fn identity(c: usize, k: usize, depthwise: bool) -> Self {
        Conv { w: init::identity_kernel(c, k, depthwise), b: Tensor::zeros(vec![c]), depthwise }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let k = self.w.shape()[2];
        x.conv2d(&self.w, Some(&self.b), k / 2, self.depthwise)
    }
}

impl<S: Scalar> Module<S> for Conv<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        visit_leaves(prefix, &mut [("w", &mut self.w), ("b", &mut self.b)], f)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        LayerNorm { gamma: Tensor::ones(vec![d]), beta: Tensor::zeros(vec![d]) }
    }

    /// Over the last axis.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gamma, &self.beta, S::lit(LN_EPS))
    }
}

impl<S: Scalar> Module<S> for LayerNorm<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        visit_leaves(prefix, &mut [("gamma", &mut self.gamma), ("beta", &mut self.beta)], f)
    }
}

/// `SiLU(DWConv3×3(Linear(x)))` on a `[d, h, w]` map.
#[derive(Clone, Debug)]
pub struct Stem<S: Scalar> {
    pub linear: Linear<S>,
    pub dwconv: Conv<S>,
}

impl<S: Scalar> Stem<S> {
    pub fn init(d: usize, rng: &mut InitRng) -> Self {
        Stem { linear: Linear::init(d, d, rng), dwconv: Conv::init_depthwise(d, 3, rng) }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.dwconv.apply(&self.linear.apply_channels(x)?)?.silu())
    }
}

impl<S: Scalar> Module<S> for Stem<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.linear.visit(&crate::params::join(prefix, "linear"), f)?;
        self.dwconv.visit(&crate::params::join(prefix, "dwconv"), f)
    }
}

/// `Linear(LN(x))` per pixel of a `[d, h, w]` map.
#[derive(Clone, Debug)]
pub struct NormProject<S: Scalar> {
    pub norm: LayerNorm<S>,
    pub linear: Linear<S>,
}

impl<S: Scalar> NormProject<S> {
    pub fn init(d: usize, rng: &mut InitRng) -> Self {
        NormProject { norm: LayerNorm::new(d), linear: Linear::init(d, d, rng) }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        from_tokens(&self.linear.apply(&self.norm.apply(&to_tokens(x)?)?)?, h, w)
    }
}

impl<S: Scalar> Module<S> for NormProject<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.norm.visit(&crate::params::join(prefix, "ln"), f)?;
        self.linear.visit(&crate::params::join(prefix, "linear"), f)
    }
}
