use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tensor::{Float, Tensor};
use crate::error::{ElmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in declaration order. The order is the one written to
/// checkpoint manifests and `params.bin`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ElmError::config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn value(&self, i: usize) -> &[T] {
        self.params[i].value.data()
    }

    /// Marks every parameter whose name starts with one of `prefixes` as
    /// trainable and freezes the rest.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter whose name
    /// starts with `prefix`, in declaration order.
    pub fn digest_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for x in p.value.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients keyed by parameter name. Frozen parameters have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Float> GradTable<T> {
    /// Builds the table from gradients aligned with `params`; entries for
    /// frozen parameters are dropped.
    pub fn from_aligned(params: &ParamSet<T>, grads: Vec<Tensor<T>>) -> Self {
        let entries = params
            .iter()
            .zip(grads)
            .filter(|(p, _)| p.trainable)
            .map(|(p, g)| (p.name.clone(), g))
            .collect();
        GradTable { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` into `self` entry by entry; both tables must come from
    /// the same parameter set.
    pub fn accumulate(&mut self, other: &GradTable<T>) {
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            debug_assert_eq!(na, nb);
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, g) in &mut self.entries {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }

    /// Largest absolute gradient entry among parameters with `prefix`.
    pub fn max_abs_with_prefix(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, g)| g.data().iter().map(|x| x.as_f64().abs()))
            .fold(0.0, f64::max)
    }
}
