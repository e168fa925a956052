use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::real::Real;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey(pub usize);

/// Named weight store. Names are stable across stores built from the same
/// configuration, which is what weight inheritance relies on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Inserts a parameter. Panics on a duplicate name: a store built twice
    /// from one config would otherwise silently alias weights.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamKey {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let key = self.tensors.len();
        self.index.insert(name.clone(), key);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamKey(key)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, key: ParamKey) -> &Tensor<T> {
        &self.tensors[key.0]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Tensor<T> {
        &mut self.tensors[key.0]
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.names[key.0]
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.index.get(name).map(|&i| ParamKey(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamKey(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalars over the given keys.
    pub fn count(&self, keys: impl IntoIterator<Item = ParamKey>) -> usize {
        keys.into_iter().map(|k| self.tensors[k.0].len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }
}

/// Lazily registers store parameters as tape leaves, once per tape.
#[derive(Debug)]
pub struct ParamBinding {
    vars: Vec<Option<Var>>,
    requires_grad: bool,
}

impl ParamBinding {
    pub fn new<T: Real>(store: &ParamStore<T>, requires_grad: bool) -> Self {
        Self {
            vars: vec![None; store.len()],
            requires_grad,
        }
    }

    pub fn var<T: Real>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, key: ParamKey) -> Var {
        if let Some(v) = self.vars[key.0] {
            return v;
        }
        let v = tape.leaf_from(store.get(key), self.requires_grad);
        self.vars[key.0] = Some(v);
        v
    }

    /// Parameters that were touched by the forward pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamKey, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamKey(i), v)))
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}
