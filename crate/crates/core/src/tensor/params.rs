use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Stable index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named, ordered collection of model parameters.
///
/// Insertion order is the canonical order used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Frozen parameters are skipped by the optimizer entirely (no weight decay either).
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let cur = self.get(id);
        if cur.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, file declares {:?}",
                cur.shape(),
                tensor.shape()
            )));
        }
        self.entries[id.0].tensor = tensor;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}
