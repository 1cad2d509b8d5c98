//! Flat, named parameter storage.
//!
//! Every tensor the network owns — weights, biases, batch-norm scale/shift,
//! and the (non-trainable) batch-norm running statistics — lives in one
//! [`ParamStore`], addressed by index. Layers hold [`ParamId`]s, gradients
//! are a parallel vector, and the optimizer walks trainable entries in index
//! order. This keeps checkpointing, finite-difference checks, and parameter
//! hashing trivial.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::seed::content_hash;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Order-sensitive content hash over names, flags, shapes, and values;
    /// used to compare parameter states for bit-identity.
    pub fn state_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for e in &self.entries {
            bytes.extend_from_slice(e.name.as_bytes());
            bytes.push(u8::from(e.trainable));
            for d in e.value.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        content_hash(&bytes)
    }
}

/// Per-parameter gradients, parallel to the store's entries.
#[derive(Debug, Clone)]
pub struct Grads {
    pub by_id: Vec<ArrayD<f64>>,
}

impl Grads {
    pub fn zeros_like(ps: &ParamStore) -> Self {
        Grads {
            by_id: ps
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.by_id[id]
    }

    pub fn add_to(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        self.by_id[id] += delta;
    }
}

/// He-normal initialization: std = sqrt(2 / fan_in), mean 0.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = normal.sample(rng);
    }
    out
}

/// Zeros of the given shape (bias and batch-norm shift initialization).
pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Ones of the given shape (batch-norm scale and running-variance init).
pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}
