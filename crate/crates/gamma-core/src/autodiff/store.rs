//! Named trainable parameters and their gradient buffers.

use rand::Rng;
use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Dense registration index, usable to key parallel per-parameter state
    /// such as optimizer moments.
    pub fn index(self) -> usize {
        self.0
    }
}

/// One trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered parameter registry. Iteration order is the registration
/// order, which keeps optimizer updates and checkpoints reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar entries of trainable parameters only.
    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Add tape-produced gradients into the stored accumulators.
    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(&g);
        }
    }

    /// Largest parameter-gradient magnitude, for diagnostics.
    pub fn max_grad_abs(&self) -> f64 {
        self.params.iter().fold(0.0f64, |m, p| m.max(p.grad.max_abs()))
    }
}

/// Xavier/Glorot uniform initialization for a dense weight.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    xavier_uniform_gain(rows, cols, 1.0, rng)
}

/// Xavier initialization scaled by `gain`. Gains below one make a layer
/// contracting, which keeps deep sum-aggregation stacks from blowing up.
pub fn xavier_uniform_gain(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

/// Uniform embedding initialization with per-entry variance 1/cols.
pub fn uniform_embedding(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (3.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}
