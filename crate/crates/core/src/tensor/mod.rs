//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is immutable. Operations on tensors that carry a tape node
//! record a backward closure on that [`Tape`]; operations on plain tensors
//! record nothing. Parameters enter a tape through [`Tape::param`], and
//! [`Tape::backward`] returns their gradients by name.
//!
//! There is no general broadcasting: the only implicit expansion is a bias
//! vector over the last axis.

mod gradcheck;
mod nn;
mod ops;
mod tape;

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use gradcheck::{gradcheck, gradcheck_many, gradcheck_with, GradcheckOptions, GradcheckReport};
pub use nn::{Activation, PoolKind};
pub use ops::CombineMode;
pub use tape::{Gradients, Tape};

pub(crate) use tape::NodeRef;

/// Input gradient slots returned by a backward closure, aligned with the
/// op's inputs. `None` means "no contribution".
pub(crate) type InputGrads<S> = Vec<Option<Vec<S>>>;

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    node: Option<NodeRef<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("new", format!("zero-sized axis in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self::raw(shape, data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::raw(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::raw(shape, (0..n).map(f).collect())
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Identifier of the tape node that produced this tensor, if any.
    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Bitwise equality of shape and values (NaN payloads included).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Largest elementwise absolute difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<S> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(other.data.iter())
                .fold(S::zero(), |m, (a, b)| m.max((*a - *b).abs()))
        })
    }

    /// Casts values into another scalar type, dropping any tape node.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        )
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<S>> {
        Rc::clone(&self.data)
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if let Some(id) = self.node_id() {
            write!(f, "@{id}")?;
        }
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        write!(f, " {head:?}")?;
        if self.len() > SHOWN {
            write!(f, "…")?;
        }
        Ok(())
    }
}

/// Creates the output tensor of an op and, when any input is tracked,
/// records `backward` on the inputs' tape.
pub(crate) fn record<S, F>(
    inputs: &[&Tensor<S>],
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    backward: F,
) -> Tensor<S>
where
    S: Scalar,
    F: FnOnce(&[S], &[bool]) -> InputGrads<S> + 'static,
{
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let tape = inputs
        .iter()
        .find_map(|t| t.node.as_ref().map(|n| n.tape.clone()));
    let node = tape.map(|tape| {
        let slots: Vec<Option<usize>> = inputs
            .iter()
            .map(|t| {
                t.node.as_ref().map(|n| {
                    assert!(n.tape.ptr_eq(&tape), "operands recorded on different tapes");
                    n.id
                })
            })
            .collect();
        let id = tape.push_op(slots, Box::new(backward));
        NodeRef { tape, id }
    });
    Tensor { shape, data, node }
}
