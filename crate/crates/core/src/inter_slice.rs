//! Fusion of the K focal-slice features into a single map.

use crate::error::{Error, Result};
use crate::init::InitRng;
use crate::layers::{from_tokens, to_tokens, Conv, LayerNorm, Linear, Stem};
use crate::params::{join, Module, Visitor};
use crate::scalar::Scalar;
use crate::scan::{fss2d, DirectionalScanParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InterSliceParams<S: Scalar> {
    pub stem: Stem<S>,
    pub scan: DirectionalScanParams<S>,
    pub norm: LayerNorm<S>,
    pub gate: Linear<S>,
    /// Bias starts at zero.
    pub out: Linear<S>,
}

impl<S: Scalar> InterSliceParams<S> {
    pub fn init(d: usize, n: usize, rng: &mut InitRng) -> Self {
        let stem = Stem::init(d, rng);
        let scan = DirectionalScanParams::init(d, n, rng);
        let gate = Linear::init(d, d, rng);
        let mut out = Linear::init(d, d, rng);
        out.b = Tensor::zeros(vec![d]);
        InterSliceParams { stem, scan, norm: LayerNorm::new(d), gate, out }
    }
}

impl<S: Scalar> Module<S> for InterSliceParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.stem.visit(&join(prefix, "stem"), f)?;
        self.scan.visit(&join(prefix, "scan"), f)?;
        self.norm.visit(&join(prefix, "ln"), f)?;
        self.gate.visit(&join(prefix, "gate"), f)?;
        self.out.visit(&join(prefix, "out"), f)
    }
}

/// `P_k = SiLU(DWConv(Linear(F_k)))`.
pub fn slice_stem<S: Scalar>(f: &Tensor<S>, p: &InterSliceParams<S>) -> Result<Tensor<S>> {
    p.stem.apply(f)
}

fn check_slices<S: Scalar>(features: &[Tensor<S>]) -> Result<&Tensor<S>> {
    let first = features
        .first()
        .ok_or_else(|| Error::contract("slice fusion needs at least one slice"))?;
    if first.rank() != 3 {
        return Err(Error::dim("slice fusion", format!("slice features must be [d, h, w], got {:?}", first.shape())));
    }
    if let Some(bad) = features.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::dim(
            "slice fusion",
            format!("slice shape {:?} differs from {:?}", bad.shape(), first.shape()),
        ));
    }
    Ok(first)
}

/// Gated residual `R_k = F_k + Linear(LN(Q_k) ⊙ SiLU(Linear(F_k)))`.
pub fn gated_residual<S: Scalar>(f: &Tensor<S>, q: &Tensor<S>, p: &InterSliceParams<S>) -> Result<Tensor<S>> {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let tf = to_tokens(f)?;
    let gate = p.gate.apply(&tf)?.silu();
    let z = p.norm.apply(&to_tokens(q)?)?.mul(&gate)?;
    from_tokens(&p.out.apply(&z)?, h, w)?.add(f)
}

/// Mean over a new leading slice axis.
pub fn slice_mean<S: Scalar>(maps: &[Tensor<S>]) -> Result<Tensor<S>> {
    let refs: Vec<&Tensor<S>> = maps.iter().collect();
    Tensor::stack(&refs)?.mean_axis(0)
}

/// `F_slices` from the K slice features (depth order).
pub fn inter_slice_fuse<S: Scalar>(features: &[Tensor<S>], p: &InterSliceParams<S>) -> Result<Tensor<S>> {
    check_slices(features)?;
    let stems = features.iter().map(|f| slice_stem(f, p)).collect::<Result<Vec<_>>>()?;
    let q = fss2d(&stems, &p.scan)?;
    let r = features
        .iter()
        .zip(&q)
        .map(|(f, q)| gated_residual(f, q, p))
        .collect::<Result<Vec<_>>>()?;
    slice_mean(&r)
}

/// Ablation baseline: concatenate the K slices on the channel axis and mix
/// with a 1×1 convolution `K·d → d`.
#[derive(Clone, Debug)]
pub struct ConcatFusionParams<S: Scalar> {
    pub conv: Conv<S>,
}

impl<S: Scalar> ConcatFusionParams<S> {
    pub fn init(d: usize, k: usize, rng: &mut InitRng) -> Self {
        ConcatFusionParams { conv: Conv::init(d, k * d, 1, rng) }
    }

    pub fn slices(&self) -> usize {
        self.conv.w.shape()[1] / self.conv.w.shape()[0]
    }
}

impl<S: Scalar> Module<S> for ConcatFusionParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.conv.visit(&join(prefix, "conv"), f)
    }
}

pub fn concat_slice_fuse<S: Scalar>(features: &[Tensor<S>], p: &ConcatFusionParams<S>) -> Result<Tensor<S>> {
    check_slices(features)?;
    if features.len() != p.slices() {
        return Err(Error::contract(format!(
            "concat fusion was built for {} slices, got {}",
            p.slices(),
            features.len()
        )));
    }
    let refs: Vec<&Tensor<S>> = features.iter().collect();
    p.conv.apply(&Tensor::concat0(&refs)?)
}
