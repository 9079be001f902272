//! Named parameter collections and initialization.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::tape::{AutogradError, Gradients, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("missing gradient for parameter {0:?}")]
    MissingGradient(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Ordered, name-addressed set of trainable tensors. Iteration order is the
/// declaration order, which keeps training and serialization deterministic.
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<(), ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter as a `requires_grad` leaf on `tape`.
    pub fn bind(&self, tape: &Tape<F>) -> Result<BoundParams<F>, ParamError> {
        let mut bound = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            index.insert(name.clone(), bound.len());
            bound.push(tape.leaf(tensor, true)?);
        }
        Ok(BoundParams { bound, index })
    }

    /// Gradients per parameter in declaration order, or an error naming the
    /// first parameter without one.
    pub fn collect_grads(
        &self,
        bound: &BoundParams<F>,
        grads: &Gradients<F>,
    ) -> Result<Vec<Vec<F>>, ParamError> {
        self.entries
            .iter()
            .map(|(name, tensor)| {
                let b = bound.get(name);
                match grads.for_tensor(b) {
                    Some(g) => Ok(g.to_vec()),
                    // A parameter the loss never touched has zero gradient.
                    None if b.node.is_some() => Ok(vec![F::ZERO; tensor.numel()]),
                    None => Err(ParamError::MissingGradient(name.clone())),
                }
            })
            .collect()
    }
}

/// Tape-bound view of a [`ParamSet`], valid for one forward/backward cycle.
pub struct BoundParams<F: Scalar> {
    bound: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> BoundParams<F> {
    /// Panics on unknown names: parameter wiring is a construction-time
    /// invariant, not a runtime condition.
    pub fn get(&self, name: &str) -> &Tensor<F> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {:?} was never declared", name));
        &self.bound[i]
    }
}

/// Uniform Glorot initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<F: Scalar, R: Rng>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(vec![rows, cols], data).expect("shape matches data by construction")
}
