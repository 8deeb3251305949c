use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
///
/// Paths are `/`-separated (`speech/blocks/0/ln1/gamma`, `tsre/head/scl1/w_w`)
/// and double as checkpoint keys and freeze-set prefixes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    paths: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        self.index.insert(path.clone(), self.paths.len());
        self.paths.push(path);
        self.tensors.push(tensor);
        Ok(ParamId(self.paths.len() - 1))
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor> {
        self.id(path).map(|id| self.get(id))
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.id(path).map(|id| &mut self.tensors[id.0])
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.paths[id.0]
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.paths
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (p, t))| (ParamId(i), p.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.paths.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, p, _)| p.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Drops every parameter whose path starts with `prefix`. Ids handed out
    /// earlier are invalidated.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let kept: Vec<(String, Tensor)> = self
            .paths
            .drain(..)
            .zip(self.tensors.drain(..))
            .filter(|(p, _)| !p.starts_with(prefix))
            .collect();
        self.index.clear();
        for (p, t) in kept {
            self.index.insert(p.clone(), self.paths.len());
            self.paths.push(p);
            self.tensors.push(t);
        }
    }

    /// Marks each parameter trainable unless frozen by one of `prefixes`.
    pub fn apply_freeze(&mut self, frozen_prefixes: &[String], always_frozen: &[&str]) {
        for (p, t) in self.paths.iter().zip(self.tensors.iter_mut()) {
            let frozen = frozen_prefixes.iter().any(|f| p.starts_with(f.as_str()))
                || always_frozen.iter().any(|f| p.starts_with(f));
            t.set_requires_grad(!frozen);
        }
    }
}
