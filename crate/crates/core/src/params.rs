//! Named parameter storage and per-step graph sessions.
//!
//! Layers hold [`ParamId`]s, not tensors. A [`Session`] binds each id to one
//! graph leaf the first time it is used, so two layers holding the same id
//! share storage and their gradients add up.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// `N(0, std²)` initialised parameter.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape.to_vec(), std, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count; shared ids count once.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn numel_of(&self, ids: &[ParamId]) -> usize {
        let mut ids = ids.to_vec();
        ids.sort();
        ids.dedup();
        ids.iter().map(|&i| self.values[i.0].numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }
}

/// One forward/backward pass over a [`ParamStore`].
pub struct Session<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            g: Graph::default(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients indexed by [`ParamId::index`]; unused parameters get `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect())
    }
}
