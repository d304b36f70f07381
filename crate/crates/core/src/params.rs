//! Named parameter storage and binding onto a [`Graph`].

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter tensors keyed by slash-separated paths such as
/// `dtco/mlp_v/fc1/weight`. Insertion order is preserved and is the order
/// used by checkpoints and optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Gaussian weights with std `1/sqrt(fan_in)`.
    pub fn add_scaled_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = 1.0 / (rows as f64).sqrt();
        self.add(name, Tensor::randn(rows, cols, std, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrites values by name. Every stored parameter must be present in
    /// `entries` with a matching shape.
    pub fn load_from<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, value) in entries {
            let Some(id) = self.id(name) else { continue };
            let slot = &mut self.values[id.0];
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter {}", self.names[missing])));
        }
        Ok(())
    }

    /// Places every parameter on `graph`; those for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, value)| {
                if trainable(name) {
                    graph.param(value.clone())
                } else {
                    graph.constant(value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, graph: &mut Graph) -> Bound {
        self.bind(graph, |_| true)
    }

    pub fn bind_constant(&self, graph: &mut Graph) -> Bound {
        self.bind(graph, |_| false)
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
