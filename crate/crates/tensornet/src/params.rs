//! Named parameter storage and seeded initialization.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{arg_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor together with its Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// Insertion-ordered parameter collection. Order is part of the checkpoint
/// contract and of the optimizer's iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return arg_err("ParamStore::insert", format!("duplicate parameter {name}"));
        }
        let (idx, _) = self.params.insert_full(name, Parameter::new(value));
        Ok(ParamId(idx))
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Parameter)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter onto `graph` as a trainable leaf. The returned
    /// vector is indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params
            .values()
            .map(|p| graph.param(p.value.clone()))
            .collect()
    }

    /// Keeps only the parameters whose names satisfy `keep`. Ids change.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }
}
