//! Named parameter storage shared by every model component.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Owns every tensor of a model: trainable weights and buffers such as
/// batch-norm running statistics. Insertion order is the canonical order
/// used by checkpoints and the optimizer.
///
/// Every mutable access bumps [`ParamStore::version`], which lets stream
/// states detect that the model changed underneath them.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    version: u64,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        self.version += 1;
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "{}: expected shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        *self.get_mut(id) = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Puts one parameter on the tape, as a leaf when `grads` is set and the
    /// parameter is trainable, otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape, id: ParamId, grads: bool) -> Var {
        let value = self.get(id).clone();
        if grads && self.is_trainable(id) {
            tape.leaf(value)
        } else {
            tape.constant(value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_bumps_version_and_clone_gets_new_identity() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![2]), true);
        let v = s.version();
        s.get_mut(id).data_mut()[0] = 1.0;
        assert!(s.version() > v);
        let c = s.clone();
        assert_ne!(c.uid(), s.uid());
        assert_eq!(c.get(id), s.get(id));
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![2]), true);
        assert!(s.set(id, Tensor::zeros(vec![3])).is_err());
        assert!(s.set(id, Tensor::full(vec![2], 4.0)).is_ok());
    }

    #[test]
    fn counts_only_trainable() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![2, 3]), true);
        s.add("running_mean", Tensor::zeros(vec![3]), false);
        assert_eq!(s.trainable_scalars(), 6);
        assert_eq!(s.len(), 2);
    }
}
