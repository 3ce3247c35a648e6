//! Named parameter storage shared by all networks, plus init helpers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors. The order is the
/// canonical order for binding onto tapes, optimizer state and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.entries.push((name.into(), t.with_requires_grad(true)));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Exact count of trainable scalars.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalar counts grouped by the name prefix before the first '.'.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in &self.entries {
            let key = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, c)) => *c += t.numel(),
                None => groups.push((key, t.numel())),
            }
        }
        groups
    }

    /// Register every parameter as a leaf on a fresh tape, in store order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        BoundParams { vars }
    }

    /// Overwrite a parameter's data from a same-shaped tensor.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if self.entries[id.0].1.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "param {} shape {:?}, got {:?}",
                self.entries[id.0].0,
                self.entries[id.0].1.shape(),
                t.shape()
            )));
        }
        self.entries[id.0].1 = t.with_requires_grad(true);
        Ok(())
    }
}

/// Tape handles for every parameter of a store, aligned by [`ParamId`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Treat an explicit list of vars (in store order) as the bound
    /// parameter set; used to differentiate through re-packed parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients per parameter after backward, in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// U(-bound, bound) tensor.
pub fn uniform_init(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scaled uniform fan-in init for a linear layer: bound = 1/sqrt(d_in).
pub fn linear_init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / (d_in as f64).sqrt();
    (uniform_init(&[d_in, d_out], bound, rng), uniform_init(&[d_out], bound, rng))
}
