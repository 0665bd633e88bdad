use std::collections::BTreeMap;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// One trainable tensor with its gradient slot and optimizer buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub(crate) velocity: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            velocity,
            frozen: false,
        }
    }
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name \"{name}\"")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter \"{name}\"")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.values().all(|p| p.frozen)
    }

    /// Adds every gradient in `grads` whose name this set owns.
    ///
    /// A gradient arriving for a frozen parameter is a contract violation;
    /// nothing is written in that case.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.params() {
            if let Some(p) = self.params.get(name) {
                if p.frozen {
                    return Err(Error::Contract(format!(
                        "gradient written to frozen parameter \"{name}\""
                    )));
                }
                if p.grad.shape() != g.shape() {
                    return Err(Error::Contract(format!(
                        "gradient shape {:?} differs from parameter \"{name}\" shape {:?}",
                        g.shape(),
                        p.grad.shape()
                    )));
                }
            }
        }
        for (name, g) in grads.params() {
            if let Some(p) = self.params.get_mut(name) {
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// True when both sets have the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.value.shape() == b.value.shape())
    }

    /// Bitwise comparison of parameter values only.
    pub fn values_bitwise_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self
                .params
                .values()
                .zip(other.params.values())
                .all(|(a, b)| a.value.bitwise_eq(&b.value))
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}
