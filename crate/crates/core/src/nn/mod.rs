//! Minimal layer library with hand-written backward passes.
//!
//! Parameters live in a flat [`ParamStore`]; layers only hold indices into
//! it. That keeps EMA, optimizers, hashing and checkpoints uniform over
//! every network in the crate.

pub mod gradcheck;
mod layers;
mod optim;

pub use layers::{
    concat_channels, crop2d, pad2d, relu, relu_backward, sigmoid, split_channels, BatchNorm,
    BnCache, BnState, BnStats, Conv1d, Conv2d, ConvTranspose2x2, Linear,
};
pub use optim::Adam;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<T>,
        trainable: bool,
    ) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        self.entries.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            data: self
                .entries
                .iter()
                .map(|e| vec![T::zero(); e.data.len()])
                .collect(),
        }
    }

    /// True when names, shapes and trainability match entry for entry.
    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.trainable == b.trainable)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Param {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Replace all values from `other`, which must share the layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Corruption("parameter layouts differ".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    /// Little-endian bytes of every value in entry order.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.numel() * std::mem::size_of::<T>());
        for e in &self.entries {
            for &v in &e.data {
                v.push_le(&mut buf);
            }
        }
        buf
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            for d in &e.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        h.update(self.value_bytes());
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex_string(&self.hash())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
