//! Named parameter storage shared by every layer of a model.

use std::collections::HashMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one parameter tensor inside a [`ParamStore`].
///
/// Layers hold ids, not tensors; two layers holding the same id share the
/// parameter and its gradient buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub path: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_path: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_path: HashMap::new(),
        }
    }

    /// Registers a new parameter under a unique dotted path.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let path = path.into();
        if self.by_path.contains_key(&path) {
            return Err(Error::invalid("param", format!("duplicate parameter path `{path}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_path.insert(path.clone(), id);
        self.entries.push(Param {
            path,
            value,
            grad: None,
        });
        Ok(id)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id_of(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_value", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds freshly computed gradients into the stored buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            let entry = &mut self.entries[id.0];
            entry.grad = Some(match entry.grad.take() {
                None => g.clone(),
                Some(prev) => prev.zip_map(g, |a, b| a + b)?,
            });
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// Copy of the whole store in another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    path: p.path.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_path: self.by_path.clone(),
        }
    }
}
