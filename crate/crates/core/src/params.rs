use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Named parameter tensors. Names are `<network>.<layer>.<w|b>`; the
/// leading segment selects the optimizer a parameter belongs to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<S = f32> {
    tensors: BTreeMap<String, Tensor<S>>,
}

/// Network prefix of a parameter name.
pub fn network_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Sub-set of parameters belonging to `network`.
    pub fn network(&self, network: &str) -> ParamSet<S> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| network_of(k) == network)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts (or replaces) every tensor of `other`.
    pub fn merge(&mut self, other: ParamSet<S>) {
        self.tensors.extend(other.tensors);
    }

    pub fn remove_network(&mut self, network: &str) {
        self.tensors.retain(|k, _| network_of(k) != network);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}
