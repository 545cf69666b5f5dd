use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// Named tensors in registration order: trainable parameters plus
/// non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    fn claim(&mut self, name: &str) -> Result<()> {
        if self.index.contains_key(name) || self.buffer_names.iter().any(|n| n == name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        Ok(())
    }

    pub(crate) fn add(&mut self, name: String, t: Tensor<T>) -> Result<usize> {
        self.claim(&name)?;
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.tensors.len() - 1)
    }

    pub(crate) fn add_buffer(&mut self, name: String, t: Tensor<T>) -> Result<usize> {
        self.claim(&name)?;
        self.buffer_names.push(name);
        self.buffers.push(t);
        Ok(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Truncated normal: resample anything beyond two standard deviations.
fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Registers parameters under a growing dotted prefix while drawing their
/// initial values from one RNG stream.
pub(crate) struct Builder<'r, T: Scalar, R: Rng> {
    pub store: ParamStore<T>,
    rng: &'r mut R,
    prefix: Vec<String>,
}

impl<'r, T: Scalar, R: Rng> Builder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            store: ParamStore::default(),
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f64) -> Result<usize> {
        let name = self.full_name(leaf);
        self.store.add(name, Tensor::full(shape, T::of(v))?)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], v: f64) -> Result<usize> {
        let name = self.full_name(leaf);
        self.store.add_buffer(name, Tensor::full(shape, T::of(v))?)
    }

    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(trunc_normal(self.rng, std))).collect();
        let name = self.full_name(leaf);
        self.store.add(name, Tensor::new(shape, data)?)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::of(z * std)
            })
            .collect();
        let name = self.full_name(leaf);
        self.store.add(name, Tensor::new(shape, data)?)
    }
}
