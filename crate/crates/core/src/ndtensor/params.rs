use indexmap::IndexMap;

use super::tape::{Tape, Var};
use super::tensor::{Result, Tensor, TensorError};
use crate::scalar::Real;

/// Named, insertion-ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T: Real = f64> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    /// Inserts (or replaces) a parameter; it is marked `requires_grad`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        let (idx, _) = self
            .params
            .insert_full(name.into(), t.with_requires_grad(true));
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn by_index(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx]
    }

    pub fn name_of(&self, idx: usize) -> &str {
        self.params.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records the named parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, name: &str) -> Result<Var<'t, T>> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(tape.param(self, idx))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / (rows + cols))`.
    Glorot,
    Zeros,
    /// Uniform on `±scale`.
    Uniform(f64),
}

/// Name, shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}
