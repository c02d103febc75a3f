use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::{InputGrads, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) type BackwardFn<S> = Box<dyn FnOnce(&[S], &[bool]) -> InputGrads<S>>;

enum NodeKind<S> {
    Param { name: String, shape: Vec<usize> },
    Op {
        inputs: Vec<Option<usize>>,
        backward: Option<BackwardFn<S>>,
    },
}

struct TapeInner<S> {
    nodes: Vec<NodeKind<S>>,
    consumed: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so every node's inputs precede
/// it. A tape supports a single [`backward`](Tape::backward) pass.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef<S: Scalar> {
    pub(crate) tape: Tape<S>,
    pub(crate) id: usize,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn ptr_eq(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `value` as a differentiation target named `name` and
    /// returns a tracked alias of it.
    pub fn param(&self, name: impl Into<String>, value: &Tensor<S>) -> Result<Tensor<S>> {
        let name = name.into();
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        if inner
            .nodes
            .iter()
            .any(|n| matches!(n, NodeKind::Param { name: m, .. } if *m == name))
        {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        let id = inner.nodes.len();
        inner.nodes.push(NodeKind::Param {
            name,
            shape: value.shape.clone(),
        });
        Ok(Tensor {
            shape: value.shape.clone(),
            data: value.shared_data(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        })
    }

    pub(crate) fn push_op(&self, inputs: Vec<Option<usize>>, backward: BackwardFn<S>) -> usize {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "recording on a tape after backward");
        let id = inner.nodes.len();
        inner.nodes.push(NodeKind::Op {
            inputs,
            backward: Some(backward),
        });
        id
    }

    /// Propagates d(loss)/d(node) back through the tape.
    ///
    /// Every registered parameter gets an entry; parameters the loss does not
    /// reach get zeros. Saved activations are released afterwards and the
    /// tape cannot be differentiated again.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<Gradients<S>> {
        let root = match &loss.node {
            Some(n) if n.tape.ptr_eq(self) => n.id,
            _ => return Err(Error::contract("loss is not recorded on this tape")),
        };
        if loss.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::contract(
                "backward already ran on this tape; re-run the forward pass",
            ));
        }
        inner.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; root + 1];
        grads[root] = Some(vec![S::one()]);
        let mut by_name = BTreeMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &mut inner.nodes[id] {
                NodeKind::Param { name, shape } => {
                    by_name.insert(name.clone(), Tensor::raw(shape.clone(), g));
                }
                NodeKind::Op { inputs, backward } => {
                    let Some(f) = backward.take() else { continue };
                    let needs: Vec<bool> = inputs.iter().map(Option::is_some).collect();
                    let input_grads = f(&g, &needs);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for (slot, gi) in inputs.iter().zip(input_grads) {
                        if let (Some(j), Some(gi)) = (slot, gi) {
                            accumulate(&mut grads[*j], gi);
                        }
                    }
                }
            }
        }
        for node in inner.nodes.iter_mut() {
            match node {
                NodeKind::Op { backward, .. } => *backward = None,
                NodeKind::Param { name, shape } => {
                    by_name
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(shape.clone()));
                }
            }
        }
        Ok(Gradients { by_name })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, g: Vec<S>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            debug_assert_eq!(acc.len(), g.len());
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Shorthand for `tape.backward(self)` on the tensor's own tape.
    pub fn backward(&self) -> Result<Gradients<S>> {
        match &self.node {
            Some(n) => n.tape.clone().backward(self),
            None => Err(Error::contract("loss does not require grad")),
        }
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S: Scalar> {
    by_name: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.by_name.get(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}
