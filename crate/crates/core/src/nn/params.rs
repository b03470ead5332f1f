use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable parameters plus non-trainable state buffers
/// (batch-norm running statistics).
///
/// Both maps are ordered by name, so digests and serialization never depend
/// on insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

pub type Grads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing buffer `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing buffer `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Feeds every parameter and buffer into `hasher` in name order.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        for (kind, map) in [(b'P', &self.params), (b'B', &self.buffers)] {
            for (name, t) in map {
                hasher.update([kind]);
                hasher.update((name.len() as u64).to_le_bytes());
                hasher.update(name.as_bytes());
                hasher.update((t.rank() as u64).to_le_bytes());
                for &d in t.shape() {
                    hasher.update((d as u64).to_le_bytes());
                }
                hasher.update(t.to_le_bytes());
            }
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    /// Every tensor (params first, then buffers) with a kind tag.
    pub(crate) fn entries(&self) -> impl Iterator<Item = (bool, &String, &Tensor)> {
        self.params
            .iter()
            .map(|(n, t)| (true, n, t))
            .chain(self.buffers.iter().map(|(n, t)| (false, n, t)))
    }
}

/// He-normal initialisation for a weight with the given fan-in.
pub(crate) fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_is_insertion_order_independent() {
        let mut a = ParamStore::new();
        a.insert_param("x", Tensor::full(&[2], 1.0));
        a.insert_param("y", Tensor::full(&[3], 2.0));
        let mut b = ParamStore::new();
        b.insert_param("y", Tensor::full(&[3], 2.0));
        b.insert_param("x", Tensor::full(&[2], 1.0));
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn checksum_sees_tiny_perturbation() {
        let mut a = ParamStore::new();
        a.insert_param("w", Tensor::full(&[4], 0.25));
        let before = a.checksum();
        a.param_mut("w").unwrap().data_mut()[2] += 1e-7;
        assert_ne!(before, a.checksum());
    }

    #[test]
    fn buffers_and_params_hash_differently() {
        let mut a = ParamStore::new();
        a.insert_param("w", Tensor::full(&[1], 1.0));
        let mut b = ParamStore::new();
        b.insert_buffer("w", Tensor::full(&[1], 1.0));
        assert_ne!(a.checksum(), b.checksum());
    }
}
