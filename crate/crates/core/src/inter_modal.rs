//! Fusion of the all-focus features with the fused slice features.
//!
//! Three streams run side by side: a middle stream over the concatenated
//! inputs, and two cross streams that exchange information in two stages.
//! In stage 1 each stream scans its own tokens with its own `B` and `Δ`,
//! but reads out with the `C` computed by the other stream at the same scan
//! position. In stage 2 each stream scans the other stream's stage-1
//! output.

use crate::error::{Error, Result};
use crate::init::InitRng;
use crate::layers::{Conv, NormProject, Stem};
use crate::params::{join, Module, Visitor};
use crate::scalar::Scalar;
use crate::scan::{fold, ss2d, unfold, DirectionalScanParams, ScanDirection};
use crate::ssm::{project_params, scan_core};
use crate::tensor::{CombineMode, Tensor};

/// Parameters of one cross stream (all-focus or slices).
#[derive(Clone, Debug)]
pub struct CrossStreamParams<S: Scalar> {
    pub stem: Stem<S>,
    pub stage1: DirectionalScanParams<S>,
    pub stage2: DirectionalScanParams<S>,
    pub head: NormProject<S>,
}

impl<S: Scalar> CrossStreamParams<S> {
    pub fn init(d: usize, n: usize, rng: &mut InitRng) -> Self {
        CrossStreamParams {
            stem: Stem::init(d, rng),
            stage1: DirectionalScanParams::init(d, n, rng),
            stage2: DirectionalScanParams::init(d, n, rng),
            head: NormProject::init(d, rng),
        }
    }
}

impl<S: Scalar> Module<S> for CrossStreamParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.stem.visit(&join(prefix, "stem"), f)?;
        self.stage1.visit(&join(prefix, "stage1"), f)?;
        self.stage2.visit(&join(prefix, "stage2"), f)?;
        self.head.visit(&join(prefix, "head"), f)
    }
}

#[derive(Clone, Debug)]
pub struct MiddleStreamParams<S: Scalar> {
    pub stem: Stem<S>,
    pub scan: DirectionalScanParams<S>,
    pub head: NormProject<S>,
}

impl<S: Scalar> Module<S> for MiddleStreamParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.stem.visit(&join(prefix, "stem"), f)?;
        self.scan.visit(&join(prefix, "scan"), f)?;
        self.head.visit(&join(prefix, "head"), f)
    }
}

#[derive(Clone, Debug)]
pub struct InterModalParams<S: Scalar> {
    /// 3×3, `2d → d`.
    pub fuse: Conv<S>,
    pub middle: MiddleStreamParams<S>,
    pub all: CrossStreamParams<S>,
    pub slices: CrossStreamParams<S>,
}

impl<S: Scalar> InterModalParams<S> {
    pub fn init(d: usize, n: usize, rng: &mut InitRng) -> Self {
        let fuse = Conv::init(d, 2 * d, 3, rng);
        let middle = MiddleStreamParams {
            stem: Stem::init(d, rng),
            scan: DirectionalScanParams::init(d, n, rng),
            head: NormProject::init(d, rng),
        };
        let all = CrossStreamParams::init(d, n, rng);
        let slices = CrossStreamParams::init(d, n, rng);
        InterModalParams { fuse, middle, all, slices }
    }
}

impl<S: Scalar> Module<S> for InterModalParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        self.fuse.visit(&join(prefix, "fuse"), f)?;
        self.middle.visit(&join(prefix, "middle"), f)?;
        self.all.visit(&join(prefix, "all"), f)?;
        self.slices.visit(&join(prefix, "slices"), f)
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::dim(op, format!("inputs {:?} and {:?} must be equal [d, h, w]", a.shape(), b.shape())));
    }
    Ok(())
}

/// `P = Conv3×3(concat(F_0, F_slices))`.
pub fn fuse_basic<S: Scalar>(f0: &Tensor<S>, fs: &Tensor<S>, p: &InterModalParams<S>) -> Result<Tensor<S>> {
    same_shape("fuse_basic", f0, fs)?;
    p.fuse.apply(&Tensor::combine(&[f0, fs], CombineMode::ConcatChannel)?)
}

/// `P̄ = Linear(LN(SS2D(SiLU(DWConv(Linear(P))))))`.
pub fn middle_stream<S: Scalar>(pm: &Tensor<S>, p: &InterModalParams<S>) -> Result<Tensor<S>> {
    let m = &p.middle;
    m.head.apply(&ss2d(&m.stem.apply(pm)?, &m.scan)?)
}

/// Outputs of the two-stage exchange.
#[derive(Clone, Debug)]
pub struct CrossOutput<S: Scalar> {
    /// Stage-2 output of the all-focus stream.
    pub s2a: Tensor<S>,
    /// Stage-2 output of the slices stream.
    pub a2s: Tensor<S>,
}

/// Two-stage cross scan of the stem outputs `x_0` and `x_slices`.
pub fn cross_ss2d<S: Scalar>(
    x0: &Tensor<S>,
    xs: &Tensor<S>,
    p: &InterModalParams<S>,
) -> Result<CrossOutput<S>> {
    cross_ss2d_with(x0, xs, p, true)
}

/// [`cross_ss2d`]; with `exchange_c = false` stage 1 reads out with each
/// stream's own `C`.
pub fn cross_ss2d_with<S: Scalar>(
    x0: &Tensor<S>,
    xs: &Tensor<S>,
    p: &InterModalParams<S>,
    exchange_c: bool,
) -> Result<CrossOutput<S>> {
    same_shape("cross_ss2d", x0, xs)?;
    let (h, w) = (x0.shape()[1], x0.shape()[2]);
    let mut y0: Option<Tensor<S>> = None;
    let mut ys: Option<Tensor<S>> = None;
    for dir in ScanDirection::ALL {
        let (b0, bs) = (p.all.stage1.get(dir), p.slices.stage1.get(dir));
        let (u0, us) = (unfold(x0, dir)?, unfold(xs, dir)?);
        let (p0, ps) = (project_params(&u0, b0)?, project_params(&us, bs)?);
        let (c0, cs) = if exchange_c { (&ps.c, &p0.c) } else { (&p0.c, &ps.c) };
        let o0 = scan_core(&u0, &p0.delta, &b0.a(), &p0.b, c0, &b0.d_skip)?;
        let os = scan_core(&us, &ps.delta, &bs.a(), &ps.b, cs, &bs.d_skip)?;
        let (o0, os) = (fold(&o0, dir, (h, w))?, fold(&os, dir, (h, w))?);
        y0 = Some(match y0 {
            None => o0,
            Some(acc) => acc.add(&o0)?,
        });
        ys = Some(match ys {
            None => os,
            Some(acc) => acc.add(&os)?,
        });
    }
    let (y0, ys) = (y0.expect("four directions"), ys.expect("four directions"));
    Ok(CrossOutput {
        s2a: ss2d(&ys, &p.all.stage2)?,
        a2s: ss2d(&y0, &p.slices.stage2)?,
    })
}

/// Every named intermediate of [`inter_modal_fuse`].
#[derive(Clone, Debug)]
pub struct InterModalTrace<S: Scalar> {
    pub p: Tensor<S>,
    pub p_bar: Tensor<S>,
    pub x0: Tensor<S>,
    pub x_slices: Tensor<S>,
    pub cross: CrossOutput<S>,
    pub f0_bar: Tensor<S>,
    pub f_slices_bar: Tensor<S>,
    pub fused: Tensor<S>,
}

pub fn inter_modal_trace<S: Scalar>(
    f0: &Tensor<S>,
    fs: &Tensor<S>,
    p: &InterModalParams<S>,
) -> Result<InterModalTrace<S>> {
    let pm = fuse_basic(f0, fs, p)?;
    let p_bar = middle_stream(&pm, p)?;
    let x0 = p.all.stem.apply(f0)?;
    let x_slices = p.slices.stem.apply(fs)?;
    let cross = cross_ss2d(&x0, &x_slices, p)?;
    let f0_bar = p.all.head.apply(&cross.s2a)?;
    let f_slices_bar = p.slices.head.apply(&cross.a2s)?;
    let fused = f0_bar
        .add(f0)?
        .add(&p_bar)?
        .add(&pm)?
        .add(&f_slices_bar)?
        .add(fs)?;
    Ok(InterModalTrace { p: pm, p_bar, x0, x_slices, cross, f0_bar, f_slices_bar, fused })
}

/// `F_fused = F̄_0 + F_0 + P̄ + P + F̄_slices + F_slices`.
pub fn inter_modal_fuse<S: Scalar>(f0: &Tensor<S>, fs: &Tensor<S>, p: &InterModalParams<S>) -> Result<Tensor<S>> {
    Ok(inter_modal_trace(f0, fs, p)?.fused)
}
