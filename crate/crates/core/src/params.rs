//! Named parameter storage shared by the network, optimizer and checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered list of named tensors. Registration order is the canonical order
/// used for optimizer state and serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(dims))
    }

    pub fn ones(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::full(dims, T::one()))
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(dims, |_| T::of(dist.sample(rng)));
        self.add(name, t)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor in place, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let Some(id) = self.find(name) else {
            bail!(Argument, "unknown parameter {name}");
        };
        self.values[id.0].expect_same_dims(&value)?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradient buffers with the same layout as a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            values: store.values.iter().map(|t| Tensor::zeros(t.dims())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.values[id.0].add_assign(g)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.data_mut().fill(T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            v.scale(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.values.iter().map(Tensor::sum_sq).sum::<T>().sqrt()
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}
