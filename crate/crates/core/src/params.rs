//! Named parameter and buffer storage.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable scalar weights.
    Weight,
    /// Non-trainable state such as batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<E> {
    name: String,
    kind: ParamKind,
    value: Arc<Tensor<E>>,
}

/// Flat, ordered store of every named tensor a model owns.
///
/// Insertion order is the initialization order, which keeps seeded
/// construction and checkpoint layout deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    entries: Vec<Entry<E>>,
    index: HashMap<String, ParamId>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    fn insert(&mut self, name: String, kind: ParamKind, value: Tensor<E>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, value: Arc::new(value) });
        id
    }

    pub fn add_weight(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.insert(name.into(), ParamKind::Weight, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.insert(name.into(), ParamKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn weight_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Weight)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub(crate) fn get_arc(&self, id: ParamId) -> Arc<Tensor<E>> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; clones the tensor if a live graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let current = self.get(id);
        if current.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.name(id),
                current.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.weight_ids().map(|id| self.get(id).len()).sum()
    }

    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: Arc::new(e.value.cast()) })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Bit-level equality of every entry, including names and kinds.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.kind == b.kind
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_weights() {
        let mut store = ParamStore::<f32>::new();
        store.add_weight("w", Tensor::zeros(&[3, 3, 1, 8]));
        store.add_weight("b", Tensor::zeros(&[8]));
        store.add_buffer("running_mean", Tensor::zeros(&[8]));
        assert_eq!(store.count_trainable(), 80);
        assert_eq!(store.find("b"), Some(ParamId(1)));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_weight("w", Tensor::zeros(&[2]));
        assert!(store.set(id, Tensor::zeros(&[3])).is_err());
    }
}
