//! Named parameter storage and deterministic initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, name_hash};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    trainable: bool,
}

/// Parameters and buffers keyed by unique dotted names, iterated in name
/// order.
///
/// Buffers (batch-norm running statistics) live alongside trainable tensors
/// so they round-trip through checkpoints, but they never receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    seed: u64,
}

impl ParamStore {
    /// An empty store whose initializers derive from `seed`.
    pub fn new(seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            seed,
        }
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name.to_string(), Entry { value, trainable });
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, false)
    }

    /// Per-name RNG: initial values depend only on (store seed, name), not on
    /// the order in which layers are constructed.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name_hash(name)))
    }

    /// Uniform in `[-b, b]` with `b = gain / sqrt(fan_in)`.
    pub fn add_fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<()> {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let t = Tensor::uniform(shape, -bound, bound, &mut rng);
        self.add_param(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Overwrites an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("`{name}` is {:?}, got {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    /// All entries by name, for checkpointing.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.value.clone()))
            .collect()
    }

    /// Replaces values from `map`. The key sets and shapes must match exactly.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.entries.keys() {
            if !map.contains_key(name) {
                return Err(Error::Format(format!("checkpoint lacks `{name}`")));
            }
        }
        for (name, t) in map {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("checkpoint has unexpected `{name}`")))?;
            if e.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "`{name}` has shape {:?} in checkpoint, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}
