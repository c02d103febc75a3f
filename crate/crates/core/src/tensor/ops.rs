use std::rc::Rc;

use super::{record, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How [`Tensor::combine`] merges a list of tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    /// Concatenate along axis 0 (the channel axis of `[C, H, W]`).
    ConcatChannel,
    /// Stack on a new leading axis.
    StackNewAxis,
    Add,
    /// Elementwise product.
    Mul,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves axis `axes[i]` of the input to position `i` of the output.
fn permute_values<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += gather[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<S: Scalar> Tensor<S> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(record(&[self], shape, self.shared_data(), |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation of the {rank} axes of {:?}", self.shape),
            ));
        }
        let (out, out_shape) = permute_values(self.data(), &self.shape, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_c = out_shape.clone();
        Ok(record(&[self], out_shape, Rc::new(out), move |g, _| {
            vec![Some(permute_values(g, &out_shape_c, &inverse).0)]
        }))
    }

    /// Rows `indices` of axis 0, in that order. Repeats are allowed.
    pub fn index_select0(&self, indices: &[usize]) -> Result<Self> {
        let rows = self.shape.first().copied().unwrap_or(1);
        if self.rank() == 0 || indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::dim(
                "index_select0",
                format!("indices out of range for axis 0 of {:?}", self.shape),
            ));
        }
        let inner = self.len() / rows;
        let src = self.data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let indices = indices.to_vec();
        let n = self.len();
        Ok(record(&[self], shape, Rc::new(out), move |g, _| {
            let mut dx = vec![S::zero(); n];
            for (k, &i) in indices.iter().enumerate() {
                for (d, &v) in dx[i * inner..(i + 1) * inner]
                    .iter_mut()
                    .zip(&g[k * inner..(k + 1) * inner])
                {
                    *d += v;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Sub-tensor `i` of axis 0, with that axis removed.
    pub fn select0(&self, i: usize) -> Result<Self> {
        let picked = self.index_select0(&[i])?;
        let shape = if self.rank() > 1 { self.shape[1..].to_vec() } else { vec![] };
        picked.reshape(shape)
    }

    /// Splits axis 0 into its sub-tensors. Inverse of stacking.
    pub fn unstack0(&self) -> Result<Vec<Self>> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::dim("unstack0", "rank-0 tensor"))?;
        (0..rows).map(|i| self.select0(i)).collect()
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Vec<S>> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let out = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(record(&[self, other], self.shape.clone(), Rc::new(out), |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let out = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(record(&[self, other], self.shape.clone(), Rc::new(out), |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let out = self.zip_with(other, "mul", |a, b| a * b)?;
        let (a, b) = (self.shared_data(), other.shared_data());
        Ok(record(&[self, other], self.shape.clone(), Rc::new(out), move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect());
            let gb = needs[1].then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect());
            vec![ga, gb]
        }))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        let out = self.zip_with(other, "div", |a, b| a / b)?;
        let (a, b) = (self.shared_data(), other.shared_data());
        Ok(record(&[self, other], self.shape.clone(), Rc::new(out), move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g / b).collect());
            let gb = needs[1].then(|| {
                g.iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect()
            });
            vec![ga, gb]
        }))
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub(crate) fn unary(
        &self,
        f: impl Fn(S) -> S,
        df: impl Fn(S, S) -> S + 'static,
    ) -> Self {
        let out: Rc<Vec<S>> = Rc::new(self.data().iter().map(|&x| f(x)).collect());
        let x = self.shared_data();
        let y = Rc::clone(&out);
        record(&[self], self.shape.clone(), out, move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn scale(&self, c: S) -> Self {
        self.unary(|x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: S) -> Self {
        self.unary(|x| x + c, |_, _| S::one())
    }

    pub fn neg(&self) -> Self {
        self.unary(|x| -x, |_, _| -S::one())
    }

    pub fn exp(&self) -> Self {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Self {
        self.unary(|x| x.ln(), |x, _| S::one() / x)
    }

    pub fn square(&self) -> Self {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// `|x|` with subgradient 0 at the origin.
    pub fn abs(&self) -> Self {
        self.unary(|x| x.abs(), |x, _| if x > S::zero() { S::one() } else if x < S::zero() { -S::one() } else { S::zero() })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { S::zero() } else { S::one() },
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Self {
        let total = self.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let n = self.len();
        record(&[self], vec![], Rc::new(vec![total]), move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Self {
        let n = S::lit(self.len() as f64);
        self.sum().scale(S::one() / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let src = self.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(record(&[self], shape, Rc::new(out), move |g, _| {
            let mut dx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let n = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.scale(S::one() / S::lit(n as f64)))
    }

    /// Merges `inputs` according to `mode`.
    pub fn combine(inputs: &[&Tensor<S>], mode: CombineMode) -> Result<Self> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("combine of an empty list"))?;
        match mode {
            CombineMode::ConcatChannel => concat0(inputs),
            CombineMode::StackNewAxis => {
                same_shapes("stack", inputs)?;
                let mut shape = vec![inputs.len()];
                shape.extend_from_slice(first.shape());
                let out: Vec<S> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
                let inner = first.len();
                Ok(record(inputs, shape, Rc::new(out), move |g, needs| {
                    needs
                        .iter()
                        .enumerate()
                        .map(|(k, &need)| need.then(|| g[k * inner..(k + 1) * inner].to_vec()))
                        .collect()
                }))
            }
            CombineMode::Add => {
                same_shapes("add", inputs)?;
                let mut out = first.to_vec();
                for t in &inputs[1..] {
                    for (o, &v) in out.iter_mut().zip(t.data()) {
                        *o += v;
                    }
                }
                Ok(record(inputs, first.shape.clone(), Rc::new(out), |g, needs| {
                    needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
                }))
            }
            CombineMode::Mul => {
                same_shapes("mul", inputs)?;
                let mut out = first.to_vec();
                for t in &inputs[1..] {
                    for (o, &v) in out.iter_mut().zip(t.data()) {
                        *o *= v;
                    }
                }
                let saved: Vec<Rc<Vec<S>>> = inputs.iter().map(|t| t.shared_data()).collect();
                Ok(record(inputs, first.shape.clone(), Rc::new(out), move |g, needs| {
                    (0..saved.len())
                        .map(|k| {
                            needs[k].then(|| {
                                let mut gk = g.to_vec();
                                for (j, other) in saved.iter().enumerate() {
                                    if j != k {
                                        for (v, &o) in gk.iter_mut().zip(other.iter()) {
                                            *v *= o;
                                        }
                                    }
                                }
                                gk
                            })
                        })
                        .collect()
                }))
            }
        }
    }

    /// Stacks on a new leading axis.
    pub fn stack(inputs: &[&Tensor<S>]) -> Result<Self> {
        Self::combine(inputs, CombineMode::StackNewAxis)
    }

    /// Concatenates along axis 0.
    pub fn concat0(inputs: &[&Tensor<S>]) -> Result<Self> {
        Self::combine(inputs, CombineMode::ConcatChannel)
    }
}

fn same_shapes<S: Scalar>(op: &'static str, inputs: &[&Tensor<S>]) -> Result<()> {
    let shape = inputs[0].shape();
    if let Some((i, t)) = inputs.iter().enumerate().find(|(_, t)| t.shape() != shape) {
        return Err(Error::dim(
            op,
            format!("input {i} has shape {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(())
}

fn concat0<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = inputs[0];
    if first.rank() == 0 {
        return Err(Error::dim("concat", "rank-0 operand"));
    }
    let tail = &first.shape()[1..];
    for (i, t) in inputs.iter().enumerate() {
        if t.rank() != first.rank() || &t.shape()[1..] != tail {
            return Err(Error::dim(
                "concat",
                format!(
                    "input {i} has shape {:?}; all axes but 0 must match {:?}",
                    t.shape(),
                    first.shape()
                ),
            ));
        }
    }
    let total: usize = inputs.iter().map(|t| t.shape()[0]).sum();
    let mut shape = first.shape().to_vec();
    shape[0] = total;
    let out: Vec<S> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let lens: Vec<usize> = inputs.iter().map(|t| t.len()).collect();
    Ok(record(inputs, shape, Rc::new(out), move |g, needs| {
        let mut start = 0;
        lens.iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let part = need.then(|| g[start..start + len].to_vec());
                start += len;
                part
            })
            .collect()
    }))
}
