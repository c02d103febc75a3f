//! The selective state-space (S6) block.
//!
//! For a token sequence `u: [T, d]` the block projects data-dependent
//! `Δ: [T, d]`, `B, C: [T, N]`, discretizes with `Ā = exp(Δ·A)` and
//! `B̄ = Δ·B`, and runs the recurrence
//!
//! ```text
//! h_t = Ā_t ⊙ h_{t-1} + B̄_t · u_t        (h_0 = 0, per channel, N states)
//! y_t = ⟨C_t, h_t⟩ + D ⊙ u_t
//! ```
//!
//! [`selective_scan`] is the differentiable path used by the model; the
//! recurrence runs as one fused tape op with an analytic backward.
//! [`selective_scan_sequential`] recomputes the same quantities with plain
//! loops and no tape, and serves as the reference.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::init::{self, InitRng};
use crate::params::{visit_leaves, Module, Visitor};
use crate::scalar::{softplus, Scalar};
use crate::tensor::{record, Tensor};

/// Rank of the low-rank Δ projection for `d` channels.
pub fn dt_rank(d: usize) -> usize {
    (d / 16).max(1)
}

/// Parameters of one S6 block with `d` channels and `N` states each.
#[derive(Clone, Debug)]
pub struct SsmBlockParams<S: Scalar> {
    /// `[d, N]`; the state matrix is `A = −exp(a_log)`.
    pub a_log: Tensor<S>,
    /// `[N, d]`
    pub w_b: Tensor<S>,
    /// `[N, d]`
    pub w_c: Tensor<S>,
    /// `[r, d]`
    pub w_dt_down: Tensor<S>,
    /// `[d, r]`
    pub w_dt_up: Tensor<S>,
    /// `[d]`
    pub dt_bias: Tensor<S>,
    /// `[d]`
    pub d_skip: Tensor<S>,
}

impl<S: Scalar> SsmBlockParams<S> {
    /// `A = −(1..N)` per channel, `D = 1`, and `dt_bias` chosen so that
    /// `softplus(dt_bias)` is log-uniform in `[1e-3, 1e-1]`.
    pub fn init(d: usize, n: usize, rng: &mut InitRng) -> Self {
        use rand::Rng;
        let r = dt_rank(d);
        let a_log = Tensor::from_fn(vec![d, n], |i| S::lit(((i % n) + 1) as f64).ln());
        let w_b = init::linear_weight(n, d, rng);
        let w_c = init::linear_weight(n, d, rng);
        let w_dt_down = init::linear_weight(r, d, rng);
        let w_dt_up = init::linear_weight(d, r, rng);
        let dt_bias = Tensor::from_fn(vec![d], |_| {
            let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
            let dt = rng.random_range(lo..hi).exp();
            // inverse softplus
            S::lit(dt + (-(-dt).exp_m1()).ln())
        });
        SsmBlockParams {
            a_log,
            w_b,
            w_c,
            w_dt_down,
            w_dt_up,
            dt_bias,
            d_skip: Tensor::ones(vec![d]),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = −exp(a_log)`, strictly negative.
    pub fn a(&self) -> Tensor<S> {
        self.a_log.exp().neg()
    }

    fn check_input(&self, u: &Tensor<S>) -> Result<(usize, usize)> {
        let d = self.channels();
        if u.rank() != 2 || u.shape()[1] != d {
            return Err(Error::dim(
                "selective_scan",
                format!("input {:?} must be [T, {d}]", u.shape()),
            ));
        }
        Ok((u.shape()[0], d))
    }
}

impl<S: Scalar> Module<S> for SsmBlockParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        visit_leaves(
            prefix,
            &mut [
                ("a_log", &mut self.a_log),
                ("w_b", &mut self.w_b),
                ("w_c", &mut self.w_c),
                ("w_dt_down", &mut self.w_dt_down),
                ("w_dt_up", &mut self.w_dt_up),
                ("dt_bias", &mut self.dt_bias),
                ("d_skip", &mut self.d_skip),
            ],
            f,
        )
    }
}

/// Data-dependent quantities of one scan.
#[derive(Clone, Debug)]
pub struct Projection<S: Scalar> {
    /// `[T, d]`, strictly positive.
    pub delta: Tensor<S>,
    /// `[T, N]`
    pub b: Tensor<S>,
    /// `[T, N]`
    pub c: Tensor<S>,
}

/// `B_t = W_B·u_t`, `C_t = W_C·u_t`, `Δ_t = softplus(W_up·W_down·u_t + dt_bias)`.
pub fn project_params<S: Scalar>(u: &Tensor<S>, p: &SsmBlockParams<S>) -> Result<Projection<S>> {
    p.check_input(u)?;
    let b = u.linear(&p.w_b, None)?;
    let c = u.linear(&p.w_c, None)?;
    let delta = u
        .linear(&p.w_dt_down, None)?
        .linear(&p.w_dt_up, Some(&p.dt_bias))?
        .softplus();
    Ok(Projection { delta, b, c })
}

/// Zero-order hold for `A`, Euler for `B`:
/// `Ā[t,i,n] = exp(Δ[t,i]·A[i,n])`, `B̄[t,i,n] = Δ[t,i]·B[t,n]`.
///
/// Value-level helper of the reference path; the result is not tracked.
pub fn discretize<S: Scalar>(
    delta: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (t, d) = match delta.shape() {
        [t, d] => (*t, *d),
        s => return Err(Error::dim("discretize", format!("Δ must be [T, d], got {s:?}"))),
    };
    let n = match (a.shape(), b.shape()) {
        ([ad, an], [bt, bn]) if *ad == d && *bt == t && an == bn => *an,
        (sa, sb) => {
            return Err(Error::dim(
                "discretize",
                format!("A {sa:?} / B {sb:?} inconsistent with Δ [{t}, {d}]"),
            ))
        }
    };
    let (dd, ad, bd) = (delta.data(), a.data(), b.data());
    let mut abar = Vec::with_capacity(t * d * n);
    let mut bbar = Vec::with_capacity(t * d * n);
    for ti in 0..t {
        for i in 0..d {
            let dt = dd[ti * d + i];
            for k in 0..n {
                abar.push((dt * ad[i * n + k]).exp());
                bbar.push(dt * bd[ti * n + k]);
            }
        }
    }
    Ok((
        Tensor::new(vec![t, d, n], abar)?,
        Tensor::new(vec![t, d, n], bbar)?,
    ))
}

/// Output and final hidden state of the reference scan.
#[derive(Clone, Debug)]
pub struct ScanTrace<S: Scalar> {
    /// `[T, d]`
    pub y: Tensor<S>,
    /// `[d, N]`, the state after the last token.
    pub last_state: Tensor<S>,
    /// `[T, d, N]`
    pub bbar: Tensor<S>,
}

/// Reference scan: explicit loops for projection, discretization and the
/// recurrence. Not differentiable.
pub fn selective_scan_sequential<S: Scalar>(
    u: &Tensor<S>,
    p: &SsmBlockParams<S>,
) -> Result<Tensor<S>> {
    Ok(selective_scan_trace(u, p)?.y)
}

pub fn selective_scan_trace<S: Scalar>(u: &Tensor<S>, p: &SsmBlockParams<S>) -> Result<ScanTrace<S>> {
    let (t, d) = p.check_input(u)?;
    let n = p.state_size();
    let r = p.w_dt_down.shape()[0];
    let ud = u.data();
    let row = |w: &Tensor<S>, j: usize, x: &[S]| -> S {
        let wr = &w.data()[j * x.len()..(j + 1) * x.len()];
        let mut acc = S::zero();
        for (a, b) in wr.iter().zip(x) {
            acc += *a * *b;
        }
        acc
    };
    let mut b = Vec::with_capacity(t * n);
    let mut c = Vec::with_capacity(t * n);
    let mut delta = Vec::with_capacity(t * d);
    for ti in 0..t {
        let ut = &ud[ti * d..(ti + 1) * d];
        for k in 0..n {
            b.push(row(&p.w_b, k, ut));
            c.push(row(&p.w_c, k, ut));
        }
        let low: Vec<S> = (0..r).map(|j| row(&p.w_dt_down, j, ut)).collect();
        for i in 0..d {
            delta.push(softplus(p.dt_bias.data()[i] + row(&p.w_dt_up, i, &low)));
        }
    }
    let a: Vec<S> = p.a_log.data().iter().map(|&v| -v.exp()).collect();
    let delta = Tensor::new(vec![t, d], delta)?;
    let a = Tensor::new(vec![d, n], a)?;
    let (abar, bbar) = discretize(&delta, &a, &Tensor::new(vec![t, n], b)?)?;

    let mut h = vec![S::zero(); d * n];
    let mut y = vec![S::zero(); t * d];
    for ti in 0..t {
        for i in 0..d {
            let ut = ud[ti * d + i];
            let mut acc = S::zero();
            for k in 0..n {
                let idx = (ti * d + i) * n + k;
                h[i * n + k] = abar.data()[idx] * h[i * n + k] + bbar.data()[idx] * ut;
                acc += c[ti * n + k] * h[i * n + k];
            }
            y[ti * d + i] = acc + p.d_skip.data()[i] * ut;
        }
    }
    Ok(ScanTrace {
        y: Tensor::new(vec![t, d], y)?,
        last_state: Tensor::new(vec![d, n], h)?,
        bbar,
    })
}

/// The recurrence as a single differentiable op.
///
/// `u, delta: [T, d]`, `a: [d, N]`, `b, c: [T, N]`, `d_skip: [d]`.
pub fn scan_core<S: Scalar>(
    u: &Tensor<S>,
    delta: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    d_skip: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (t, d) = match u.shape() {
        [t, d] => (*t, *d),
        s => return Err(Error::dim("scan_core", format!("u must be [T, d], got {s:?}"))),
    };
    let n = a.shape().get(1).copied().unwrap_or(0);
    let ok = delta.shape() == [t, d]
        && a.shape() == [d, n]
        && b.shape() == [t, n]
        && c.shape() == [t, n]
        && d_skip.shape() == [d];
    if !ok {
        return Err(Error::dim(
            "scan_core",
            format!(
                "u {:?}, Δ {:?}, A {:?}, B {:?}, C {:?}, D {:?} are inconsistent",
                u.shape(),
                delta.shape(),
                a.shape(),
                b.shape(),
                c.shape(),
                d_skip.shape()
            ),
        ));
    }
    let (ud, dd, ad, bd, cd, sd) = (
        u.shared_data(),
        delta.shared_data(),
        a.shared_data(),
        b.shared_data(),
        c.shared_data(),
        d_skip.shared_data(),
    );
    let dn = d * n;
    let mut abar = vec![S::zero(); t * dn];
    let mut hs = vec![S::zero(); t * dn];
    let mut y = vec![S::zero(); t * d];
    let mut h = vec![S::zero(); dn];
    for ti in 0..t {
        for i in 0..d {
            let dt = dd[ti * d + i];
            let ut = ud[ti * d + i];
            let mut acc = S::zero();
            for k in 0..n {
                let ab = (dt * ad[i * n + k]).exp();
                let bb = dt * bd[ti * n + k];
                let hv = ab * h[i * n + k] + bb * ut;
                h[i * n + k] = hv;
                abar[ti * dn + i * n + k] = ab;
                acc += cd[ti * n + k] * hv;
            }
            y[ti * d + i] = acc + sd[i] * ut;
        }
        hs[ti * dn..(ti + 1) * dn].copy_from_slice(&h);
    }

    let backward = move |g: &[S], _needs: &[bool]| {
        let mut du = vec![S::zero(); t * d];
        let mut ddelta = vec![S::zero(); t * d];
        let mut da = vec![S::zero(); dn];
        let mut db = vec![S::zero(); t * n];
        let mut dc = vec![S::zero(); t * n];
        let mut dskip = vec![S::zero(); d];
        // dL/dh_t contributed by later steps (already multiplied by Ā_{t+1})
        let mut carry = vec![S::zero(); dn];
        for ti in (0..t).rev() {
            for i in 0..d {
                let gy = g[ti * d + i];
                let dt = dd[ti * d + i];
                let ut = ud[ti * d + i];
                dskip[i] += gy * ut;
                let mut du_acc = gy * sd[i];
                let mut dd_acc = S::zero();
                for k in 0..n {
                    let idx = i * n + k;
                    let ht = hs[ti * dn + idx];
                    let hprev = if ti > 0 { hs[(ti - 1) * dn + idx] } else { S::zero() };
                    let ab = abar[ti * dn + idx];
                    let gh = carry[idx] + gy * cd[ti * n + k];
                    dc[ti * n + k] += gy * ht;
                    let dab = gh * hprev * ab;
                    dd_acc += dab * ad[idx] + gh * bd[ti * n + k] * ut;
                    da[idx] += dab * dt;
                    db[ti * n + k] += gh * dt * ut;
                    du_acc += gh * dt * bd[ti * n + k];
                    carry[idx] = gh * ab;
                }
                du[ti * d + i] = du_acc;
                ddelta[ti * d + i] = dd_acc;
            }
        }
        vec![Some(du), Some(ddelta), Some(da), Some(db), Some(dc), Some(dskip)]
    };
    Ok(record(
        &[u, delta, a, b, c, d_skip],
        vec![t, d],
        Rc::new(y),
        backward,
    ))
}

/// Differentiable selective scan of `u: [T, d]`.
pub fn selective_scan<S: Scalar>(u: &Tensor<S>, p: &SsmBlockParams<S>) -> Result<Tensor<S>> {
    let proj = project_params(u, p)?;
    scan_core(u, &proj.delta, &p.a(), &proj.b, &proj.c, &p.d_skip)
}

/// Selective scan whose output matrix `C: [T, N]` is supplied by the caller
/// instead of being projected from `u`.
pub fn selective_scan_with_c<S: Scalar>(
    u: &Tensor<S>,
    p: &SsmBlockParams<S>,
    c: &Tensor<S>,
) -> Result<Tensor<S>> {
    let proj = project_params(u, p)?;
    scan_core(u, &proj.delta, &p.a(), &proj.b, c, &p.d_skip)
}
