//! Hierarchically named parameter trees.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub type Visitor<'a, S> = dyn FnMut(&str, &mut Tensor<S>) -> Result<()> + 'a;

/// A bundle of named tensors.
pub trait Module<S: Scalar> {
    /// Calls `f` on every tensor with its full dotted name, in a fixed order.
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()>;
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visits a list of named leaf tensors under `prefix`.
pub fn visit_leaves<S: Scalar>(
    prefix: &str,
    leaves: &mut [(&str, &mut Tensor<S>)],
    f: &mut Visitor<'_, S>,
) -> Result<()> {
    for (name, t) in leaves.iter_mut() {
        f(&join(prefix, name), t)?;
    }
    Ok(())
}

/// Convenience operations for any cloneable [`Module`].
pub trait ModuleExt<S: Scalar>: Module<S> + Clone {
    fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        let mut copy = self.clone();
        copy.visit("", &mut |name, t| {
            out.push((name.to_string(), t.clone()));
            Ok(())
        })
        .expect("collecting never fails");
        out
    }

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy whose tensors selected by `trainable` are registered on `tape`.
    fn bind(&self, tape: &Tape<S>, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut bound = self.clone();
        bound.visit("", &mut |name, t| {
            if trainable(name) {
                *t = tape.param(name, t)?;
            }
            Ok(())
        })?;
        Ok(bound)
    }

    /// Replaces every tensor with the same-named entry of `table`.
    fn load_named(&mut self, table: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        self.visit("", &mut |name, t| {
            let src = table.get(name).ok_or_else(|| Error::Param {
                name: name.to_string(),
                detail: "missing tensor".into(),
            })?;
            if src.shape() != t.shape() {
                return Err(Error::Param {
                    name: name.to_string(),
                    detail: format!("shape {:?} does not match expected {:?}", src.shape(), t.shape()),
                });
            }
            *t = src.detach();
            Ok(())
        })
    }
}

impl<S: Scalar, M: Module<S> + Clone> ModuleExt<S> for M {}
