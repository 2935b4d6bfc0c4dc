use std::collections::BTreeMap;

use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Name-addressed tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> NamedTensors<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Model(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("unknown tensor `{name}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::dim("replace", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Model(format!("unknown tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("unknown tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NamedTensors<U> {
        NamedTensors {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let z = Tensor::from_parts(v.shape().to_vec(), vec![T::zero(); v.len()]);
                    (k.clone(), z)
                })
                .collect(),
        }
    }

    /// Errors naming the first tensor whose name or shape disagrees.
    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::Model(format!("tensor `{name}` missing"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Model(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other
            .tensors
            .keys()
            .find(|k| !self.tensors.contains_key(*k))
        {
            return Err(Error::Model(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Every tensor of a [`NamedTensors`] registered on one tape.
#[derive(Debug)]
pub struct ParamVars<'t, T: Scalar = f32> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    /// Registers each tensor as a trainable leaf. Storage is shared, not copied.
    pub fn bind(tape: &'t Tape<T>, params: &NamedTensors<T>) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(k, v)| (k.to_string(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Registers each tensor as a constant, for inference.
    pub fn constants(tape: &'t Tape<T>, params: &NamedTensors<T>) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(k, v)| (k.to_string(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("unknown parameter `{name}`")))
    }

    /// Gradient for every parameter, zero where a parameter was unused.
    pub fn gradients(&self, grads: &Gradients<T>) -> NamedTensors<T> {
        NamedTensors {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), grads.wrt(v)))
                .collect(),
        }
    }
}
