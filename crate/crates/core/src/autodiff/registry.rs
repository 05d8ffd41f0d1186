use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named trainable tensors, keyed by dot-separated path.
///
/// Iteration is lexicographic by name, which fixes the order of
/// checkpoints, gradient norms and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for every registry entry, produced by
/// [`ParameterRegistry::bind`].
#[derive(Clone, Debug, Default)]
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Scalar> ParameterRegistry<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts or replaces `name`. Inserted tensors are marked trainable.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
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

    /// Total scalar count across all tensors.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Places every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Params {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
            .collect();
        Params { vars }
    }

    /// Reads back gradients after `g.backward`; parameters that did not
    /// take part in the loss get zeros.
    pub fn collect_grads(&self, g: &Graph<T>, params: &Params) -> BTreeMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let grad = params
                    .vars
                    .get(name)
                    .and_then(|&v| g.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), grad)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterRegistry<U> {
        ParameterRegistry {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}
