use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Slot<T> {
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
    trainable: bool,
}

/// Named parameters with gradient accumulators.
///
/// Gradients accumulate across [`ParamStore::accumulate`] calls until
/// [`ParamStore::zero_grad`] (the optimizer zeroes after each step).
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    slots: IndexMap<String, Slot<T>>,
    step: u64,
    /// Identity shared by clones; lets a graph refuse parameters of a
    /// different store.
    uid: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        Self {
            slots: IndexMap::new(),
            step: 0,
            uid: NEXT.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        let (idx, _) = self.slots.insert_full(
            name,
            Slot {
                value: Arc::new(value),
                grad,
                trainable: true,
            },
        );
        Ok(ParamId(idx))
    }

    /// Fan-averaged uniform (Glorot) initialization for a `[fan_in, fan_out]`
    /// style shape; the last axis is treated as fan-out.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64c(rng.gen_range(-limit..limit)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.slots.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.slots.get_index(id.0).expect("valid id").0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.slots[id.0].value.clone()
    }

    /// Mutable access; copies if a live graph still shares the value.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.slots[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].grad
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    /// Frozen parameters take no gradient in graphs bound afterwards.
    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.slots[id.0].trainable = on;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Adds graph gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let dst = self.slots[id.0].grad.data_mut();
            for (d, &s) in dst.iter_mut().zip(g.data()) {
                *d = *d + s;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.slots
            .values()
            .fold(T::zero(), |acc, s| acc + s.grad.sq_norm())
            .sqrt()
    }

    /// Iterates `(name, value)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &*s.value))
    }

    /// Replaces all values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for ((name, dst), (oname, src)) in self.slots.iter_mut().zip(&other.slots) {
            if name != oname || dst.value.shape() != src.value.shape() {
                return Err(Error::Config(format!("parameter {name} does not match {oname}")));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
