use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as batchnorm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
    /// Frozen trainables keep their values through optimizer steps.
    pub frozen: bool,
}

/// Named collection of every tensor a model owns, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, kind: ParamKind, mut tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        tensor.requires_grad = kind == ParamKind::Trainable;
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            kind,
            tensor,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn trainable(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, ParamKind::Trainable, tensor)
    }

    pub fn buffer(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.insert(name, ParamKind::Buffer, tensor)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Trainable scalars whose names start with `prefix`.
    pub fn num_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable && p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Marks every trainable under `prefix` as frozen (or thaws it).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Overwrites the value of `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: &Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let dst = &mut self.params[id.0].tensor;
        if dst.shape() != value.shape() {
            return Err(Error::ShapeConflict {
                name: name.to_string(),
                file: value.shape().to_vec(),
                model: dst.shape().to_vec(),
            });
        }
        dst.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}
