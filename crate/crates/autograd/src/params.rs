//! Named parameter storage with stable ordering.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named, learnable tensors.
///
/// Registration order is the iteration order, so two stores built by the
/// same code path enumerate parameters identically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        id
    }

    /// Normal(0, std) initialisation.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| std * standard_normal(rng)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes every parameter whose name starts with `prefix`; returns the count.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.frozen[i] = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Box-Muller standard normal sample.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gradients keyed by parameter id; `None` for parameters no path reached.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    pub(crate) values: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        if self.values.len() <= id.0 {
            self.values.resize(id.0 + 1, None);
        }
        self.values[id.0] = Some(grad);
    }

    pub fn accumulate(&mut self, other: &Grads) {
        if self.values.len() < other.values.len() {
            self.values.resize(other.values.len(), None);
        }
        for (mine, theirs) in self.values.iter_mut().zip(&other.values) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.values.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm_of(&self, id: ParamId) -> f64 {
        self.get(id).map(Tensor::norm).unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(Tensor::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
