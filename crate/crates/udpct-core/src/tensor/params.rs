use alloc::string::String;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, TArray};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamSlot<T> {
    pub name: String,
    pub value: TArray<T>,
    pub grad: TArray<T>,
    /// Trainable parameters get optimizer state; buffers (running stats) do not.
    pub trainable: bool,
}

/// Flat store of named parameters and buffers for one network.
///
/// Gradients accumulate additively across uses within a backward pass and are
/// zeroed explicitly between optimizer steps.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    slots: Vec<ParamSlot<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: TArray<T>, trainable: bool) -> ParamId {
        let grad = TArray::zeros(value.shape());
        self.slots.push(ParamSlot {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot<T> {
        &self.slots[id.0]
    }

    pub fn value(&self, id: ParamId) -> &TArray<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TArray<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &TArray<T> {
        &self.slots[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &TArray<T>) {
        self.slots[id.0].grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSlot<T>)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    /// Total element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.value.numel())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }
}

/// Zero-mean normal draws in a deterministic stream order.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> TArray<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    TArray::from_vec(shape, data).expect("shape/data agree")
}
