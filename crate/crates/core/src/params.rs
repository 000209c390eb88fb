//! Named parameter storage shared by every network in the crate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sonoseg_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Trainable,
    /// Running statistics and other state that is not a learned weight.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Flat, ordered list of named tensors. Layers keep [`ParamId`]s into it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.iter().filter(|(_, e)| e.kind == ParamKind::Trainable)
    }

    /// Number of trainable scalars whose name starts with any of `prefixes`.
    pub fn count_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.trainable()
            .filter(|(_, e)| prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|(_, e)| e.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces every value with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(other) {
            if &entry.name != name || entry.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = value.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// He-normal initialization: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

/// Uniform `[-bound, bound]` initialization.
pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}
