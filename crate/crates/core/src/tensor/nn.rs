use std::rc::Rc;

use super::{record, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
    Sigmoid,
    Softplus,
    /// tanh approximation.
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&a, &b)| acc + a * b)
}

fn transpose2<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // 0.5 x (1 + tanh(k (x + 0.044715 x^3))), k = sqrt(2/pi)
    let k = S::lit(0.797_884_560_802_865_4);
    let c = S::lit(0.044_715);
    let half = S::lit(0.5);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let y = half * x * (S::one() + th);
    let dinner = k * (S::one() + S::lit(3.0) * c * x * x);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * dinner;
    (y, dy)
}

/// Bilinear ×2 taps along one axis (half-pixel centers, edge clamped).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

impl<S: Scalar> Tensor<S> {
    /// `x·Wᵀ + b` over the last axis. `w` is `[d_out, d_in]`.
    pub fn linear(&self, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::dim("linear", format!("weight must be rank 2, got {:?}", w.shape())));
        }
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        let last = self.shape().last().copied().unwrap_or(0);
        if last != d_in {
            return Err(Error::dim(
                "linear",
                format!("input last axis {last} (shape {:?}) != weight axis 1 {d_in}", self.shape()),
            ));
        }
        if let Some(b) = b {
            if b.shape() != [d_out] {
                return Err(Error::dim(
                    "linear",
                    format!("bias shape {:?} != [{d_out}] (weight axis 0)", b.shape()),
                ));
            }
        }
        let m = self.len() / d_in;
        let wt = transpose2(w.data(), d_out, d_in);
        let x = self.data();
        let mut out = vec![S::zero(); m * d_out];
        for r in 0..m {
            let y = &mut out[r * d_out..(r + 1) * d_out];
            if let Some(b) = b {
                y.copy_from_slice(b.data());
            }
            for (i, &xv) in x[r * d_in..(r + 1) * d_in].iter().enumerate() {
                axpy(y, xv, &wt[i * d_out..(i + 1) * d_out]);
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let (xs, ws) = (self.shared_data(), w.shared_data());
        let backward = move |g: &[S], needs: &[bool]| {
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); m * d_in];
                for r in 0..m {
                    let row = &mut dx[r * d_in..(r + 1) * d_in];
                    for (o, &gv) in g[r * d_out..(r + 1) * d_out].iter().enumerate() {
                        axpy(row, gv, &ws[o * d_in..(o + 1) * d_in]);
                    }
                }
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![S::zero(); d_out * d_in];
                for r in 0..m {
                    let xr = &xs[r * d_in..(r + 1) * d_in];
                    for (o, &gv) in g[r * d_out..(r + 1) * d_out].iter().enumerate() {
                        axpy(&mut dw[o * d_in..(o + 1) * d_in], gv, xr);
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    let mut db = vec![S::zero(); d_out];
                    for r in 0..m {
                        for (d, &gv) in db.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                            *d += gv;
                        }
                    }
                    db
                }));
            }
            grads
        };
        Ok(match b {
            Some(b) => record(&[self, w, b], shape, Rc::new(out), backward),
            None => record(&[self, w], shape, Rc::new(out), backward),
        })
    }

    /// Batched matrix product `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn bmm(&self, other: &Tensor<S>) -> Result<Self> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(Error::dim(
                "bmm",
                format!("cannot multiply {a:?} by {b:?} (need [B,M,K]×[B,K,N])"),
            ));
        }
        let (batch, m, k, n) = (a[0], a[1], a[2], b[2]);
        let (ad, bd) = (self.shared_data(), other.shared_data());
        let mut out = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            let (ab, bb) = (&ad[t * m * k..], &bd[t * k * n..]);
            for i in 0..m {
                let row = &mut out[(t * m + i) * n..(t * m + i + 1) * n];
                for p in 0..k {
                    axpy(row, ab[i * k + p], &bb[p * n..(p + 1) * n]);
                }
            }
        }
        Ok(record(&[self, other], vec![batch, m, n], Rc::new(out), move |g, needs| {
            let da = needs[0].then(|| {
                let mut da = vec![S::zero(); batch * m * k];
                for t in 0..batch {
                    for i in 0..m {
                        let gr = &g[(t * m + i) * n..(t * m + i + 1) * n];
                        for p in 0..k {
                            da[(t * m + i) * k + p] = dot(gr, &bd[(t * k + p) * n..(t * k + p + 1) * n]);
                        }
                    }
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![S::zero(); batch * k * n];
                for t in 0..batch {
                    for i in 0..m {
                        let gr = &g[(t * m + i) * n..(t * m + i + 1) * n];
                        for p in 0..k {
                            axpy(&mut db[(t * k + p) * n..(t * k + p + 1) * n], ad[(t * m + i) * k + p], gr);
                        }
                    }
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Matrix product `[M, K] × [K, N]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("need rank-2 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, n) = (self.shape()[0], other.shape()[1]);
        let a = self.reshape(vec![1, m, self.shape()[1]])?;
        let b = other.reshape(vec![1, other.shape()[0], n])?;
        a.bmm(&b)?.reshape(vec![m, n])
    }

    /// 2-D cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`
    /// (or `[C, 1, k, k]` when `depthwise`), zero padding on every side.
    pub fn conv2d(
        &self,
        kernel: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        padding: usize,
        depthwise: bool,
    ) -> Result<Self> {
        if self.rank() != 3 || kernel.rank() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("need input [C,H,W] and kernel [Co,Ci,k,k], got {:?} and {:?}", self.shape(), kernel.shape()),
            ));
        }
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let ks = kernel.shape();
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kh != kw {
            return Err(Error::dim("conv2d", format!("kernel must be square, got {kh}×{kw}")));
        }
        let k = kh;
        if depthwise {
            if kc != 1 || c_out != c_in {
                return Err(Error::dim(
                    "conv2d",
                    format!("depthwise kernel must be [{c_in},1,k,k], got {ks:?}"),
                ));
            }
        } else if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("kernel axis 1 is {kc} but input has {c_in} channels"),
            ));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k}×{k} larger than padded input {}×{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::dim("conv2d", format!("bias shape {:?} != [{c_out}]", b.shape())));
            }
        }
        let (ho, wo) = (h + 2 * padding - k + 1, w + 2 * padding - k + 1);
        let geom = ConvGeom { c_in, h, w, c_out, padding, ho, wo, depthwise };
        let x = self.data();
        let kd = kernel.data();
        let mut out = vec![S::zero(); c_out * ho * wo];
        for co in 0..c_out {
            let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b.data()[co]);
            }
            for (kci, ci) in geom.inputs_of(co) {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kd[((co * kc + kci) * k + ky) * k + kx];
                        geom.for_each_row(ky, kx, |oy, iy, ox0, ix0, len| {
                            axpy(
                                &mut plane[oy * wo + ox0..oy * wo + ox0 + len],
                                wv,
                                &x[(ci * h + iy) * w + ix0..(ci * h + iy) * w + ix0 + len],
                            );
                        });
                    }
                }
            }
        }
        let (xs, kds) = (self.shared_data(), kernel.shared_data());
        let kernel_len = kernel.len();
        let backward = move |g: &[S], needs: &[bool]| {
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); c_in * h * w];
                for co in 0..c_out {
                    let gp = &g[co * ho * wo..(co + 1) * ho * wo];
                    for (kci, ci) in geom.inputs_of(co) {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = kds[((co * kc + kci) * k + ky) * k + kx];
                                geom.for_each_row(ky, kx, |oy, iy, ox0, ix0, len| {
                                    axpy(
                                        &mut dx[(ci * h + iy) * w + ix0..(ci * h + iy) * w + ix0 + len],
                                        wv,
                                        &gp[oy * wo + ox0..oy * wo + ox0 + len],
                                    );
                                });
                            }
                        }
                    }
                }
                dx
            });
            let dk = needs[1].then(|| {
                let mut dk = vec![S::zero(); kernel_len];
                for co in 0..c_out {
                    let gp = &g[co * ho * wo..(co + 1) * ho * wo];
                    for (kci, ci) in geom.inputs_of(co) {
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut acc = S::zero();
                                geom.for_each_row(ky, kx, |oy, iy, ox0, ix0, len| {
                                    acc += dot(
                                        &gp[oy * wo + ox0..oy * wo + ox0 + len],
                                        &xs[(ci * h + iy) * w + ix0..(ci * h + iy) * w + ix0 + len],
                                    );
                                });
                                dk[((co * kc + kci) * k + ky) * k + kx] = acc;
                            }
                        }
                    }
                }
                dk
            });
            let mut grads = vec![dx, dk];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| {
                    (0..c_out)
                        .map(|co| g[co * ho * wo..(co + 1) * ho * wo].iter().fold(S::zero(), |a, &v| a + v))
                        .collect()
                }));
            }
            grads
        };
        let shape = vec![c_out, ho, wo];
        Ok(match bias {
            Some(b) => record(&[self, kernel, b], shape, Rc::new(out), backward),
            None => record(&[self, kernel], shape, Rc::new(out), backward),
        })
    }

    pub fn activation(&self, kind: Activation) -> Self {
        match kind {
            Activation::Relu => self.unary(
                |x| x.max(S::zero()),
                |x, _| if x > S::zero() { S::one() } else { S::zero() },
            ),
            Activation::Sigmoid => self.unary(sigmoid, |_, y| y * (S::one() - y)),
            Activation::Softplus => self.unary(softplus, |x, _| sigmoid(x)),
            Activation::Silu => self.unary(
                |x| x * sigmoid(x),
                |x, _| {
                    let s = sigmoid(x);
                    s * (S::one() + x * (S::one() - s))
                },
            ),
            Activation::Gelu => self.unary(|x| gelu_parts(x).0, |x, _| gelu_parts(x).1),
        }
    }

    pub fn silu(&self) -> Self {
        self.activation(Activation::Silu)
    }

    pub fn relu(&self) -> Self {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(&self) -> Self {
        self.activation(Activation::Sigmoid)
    }

    pub fn softplus(&self) -> Self {
        self.activation(Activation::Softplus)
    }

    /// Normalizes over the last axis (biased variance), then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Self> {
        let d = self.shape().last().copied().unwrap_or(0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("gamma {:?} / beta {:?} must be [{d}] to match last axis of {:?}", gamma.shape(), beta.shape(), self.shape()),
            ));
        }
        let rows = self.len() / d;
        let dn = S::lit(d as f64);
        let x = self.data();
        let (gd, bd) = (gamma.data(), beta.data());
        let mut xhat = vec![S::zero(); self.len()];
        let mut inv = vec![S::zero(); rows];
        let mut out = vec![S::zero(); self.len()];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().fold(S::zero(), |a, &v| a + v) / dn;
            let var = xr.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let iv = S::one() / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let xh = (xr[j] - mean) * iv;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let gs = gamma.shared_data();
        Ok(record(&[self, gamma, beta], self.shape().to_vec(), Rc::new(out), move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gs[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        dx[r * d + j] = inv[r] * (gr[j] * gs[j] - m1 - xh[j] * m2);
                    }
                }
                dx
            });
            let dgamma = needs[1].then(|| {
                let mut dgm = vec![S::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        dgm[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                dgm
            });
            let dbeta = needs[2].then(|| {
                let mut db = vec![S::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
                db
            });
            vec![dx, dgamma, dbeta]
        }))
    }

    /// Window pooling over `[C, H, W]` without padding.
    pub fn pool2d(&self, kind: PoolKind, window: usize, stride: usize) -> Result<Self> {
        if self.rank() != 3 || window == 0 || stride == 0 {
            return Err(Error::dim("pool2d", format!("need [C,H,W] input, got {:?}", self.shape())));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        for (axis, n) in [("H", h), ("W", w)] {
            if n < window || n % stride != 0 || (n - window) % stride != 0 {
                return Err(Error::dim(
                    "pool2d",
                    format!("axis {axis}={n} not tiled by window {window} stride {stride}"),
                ));
            }
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.data();
        let mut out = vec![S::zero(); c * ho * wo];
        let mut argmax = vec![0usize; if kind == PoolKind::Max { out.len() } else { 0 }];
        let area = S::lit((window * window) as f64);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (ch * ho + oy) * wo + ox;
                    let mut best = S::neg_infinity();
                    let mut best_at = 0;
                    let mut acc = S::zero();
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                            acc += x[i];
                            if x[i] > best {
                                best = x[i];
                                best_at = i;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[o] = best;
                            argmax[o] = best_at;
                        }
                        PoolKind::Avg => out[o] = acc / area,
                    }
                }
            }
        }
        let n = self.len();
        Ok(record(&[self], vec![c, ho, wo], Rc::new(out), move |g, _| {
            let mut dx = vec![S::zero(); n];
            match kind {
                PoolKind::Max => {
                    for (o, &i) in argmax.iter().enumerate() {
                        dx[i] += g[o];
                    }
                }
                PoolKind::Avg => {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(ch * ho + oy) * wo + ox] / area;
                                for dy in 0..window {
                                    for dxx in 0..window {
                                        dx[(ch * h + oy * stride + dy) * w + ox * stride + dxx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Self {
        let d = self.shape().last().copied().unwrap_or(1);
        let rows = self.len() / d;
        let x = self.data();
        let mut out = vec![S::zero(); self.len()];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mx = xr.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut total = S::zero();
            for j in 0..d {
                let e = (xr[j] - mx).exp();
                out[r * d + j] = e;
                total += e;
            }
            for v in &mut out[r * d..(r + 1) * d] {
                *v = *v / total;
            }
        }
        let out = Rc::new(out);
        let y = Rc::clone(&out);
        record(&[self], self.shape().to_vec(), out, move |g, _| {
            let mut dx = vec![S::zero(); rows * d];
            for r in 0..rows {
                let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                let s = dot(gr, yr);
                for j in 0..d {
                    dx[r * d + j] = yr[j] * (gr[j] - s);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Bilinear ×2 upsampling of `[C, H, W]` (half-pixel centers).
    pub fn upsample2x(&self) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::dim("upsample2x", format!("need [C,H,W], got {:?}", self.shape())));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let ty: Vec<_> = upsample_taps(h).into_iter().map(|(a, b, wa, wb)| (a, b, S::lit(wa), S::lit(wb))).collect();
        let tx: Vec<_> = upsample_taps(w).into_iter().map(|(a, b, wa, wb)| (a, b, S::lit(wa), S::lit(wb))).collect();
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![S::zero(); c * ho * wo];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    out[(ch * ho + oy) * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        Ok(record(&[self], vec![c, ho, wo], Rc::new(out), move |g, _| {
            let mut dx = vec![S::zero(); c * h * w];
            for ch in 0..c {
                let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = g[(ch * ho + oy) * wo + ox];
                        dst[y0 * w + x0] += gv * wy0 * wx0;
                        dst[y0 * w + x1] += gv * wy0 * wx1;
                        dst[y1 * w + x0] += gv * wy1 * wx0;
                        dst[y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    depthwise: bool,
}

impl ConvGeom {
    /// (kernel-channel index, input channel) pairs feeding output `co`.
    fn inputs_of(&self, co: usize) -> impl Iterator<Item = (usize, usize)> {
        debug_assert!(co < self.c_out);
        let (start, end, dw) = if self.depthwise { (co, co + 1, true) } else { (0, self.c_in, false) };
        (start..end).map(move |ci| (if dw { 0 } else { ci }, ci))
    }

    /// Visits every output row touched by kernel tap `(ky, kx)` as a
    /// contiguous run: `(oy, iy, ox0, ix0, len)`.
    #[inline]
    fn for_each_row(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let p = self.padding;
        let ox0 = p.saturating_sub(kx);
        let ox1 = self.wo.min(self.w + p - kx);
        if ox1 <= ox0 {
            return;
        }
        let len = ox1 - ox0;
        let ix0 = ox0 + kx - p;
        for oy in 0..self.ho {
            let iy = oy + ky;
            if iy < p || iy - p >= self.h {
                continue;
            }
            f(oy, iy - p, ox0, ix0, len);
        }
    }
}
