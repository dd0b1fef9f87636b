//! Named parameter storage shared by every model component.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of named tensors. Names are unique; iteration is by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Looks up `name` and checks its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if self.tensors[id.0].shape() != shape {
            return Err(Error::Shape {
                op: "param",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `(name, tensor)` pairs in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.by_name
            .iter()
            .map(move |(n, id)| (n.as_str(), &self.tensors[id.0]))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied()
    }

    /// Total number of scalar parameters, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = self.require(name, t.shape())?;
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    pub fn flat(&self, prefix: &str) -> Vec<Real> {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}
