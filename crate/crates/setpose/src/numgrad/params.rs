use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a parameter in a [`ParamStore`]. Stable across the store's
/// lifetime; checkpoints serialize parameters in id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

struct Entry<S> {
    name: String,
    value: Tensor<S>,
}

/// Owns the master copy of every trainable parameter. Tapes bind read-only
/// copies per forward pass; the optimizer writes updates back here.
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Register a parameter under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract("param_store", format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Entry { name, value });
        Ok(ParamId((self.entries.len() - 1) as u32))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.index()].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.index()].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index()].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(|i| ParamId(i as u32))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e.name.as_str(), &e.value))
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore::new()
    }
}
