//! Named parameter storage and seeded initialisation helpers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named tensors. Names are dotted paths
/// (`idn.enc1.block.attn.qkv.weight`); the first segment is the namespace
/// used for freezing and checkpoint filtering.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            trainable: self.trainable.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(true);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Marks every parameter whose name starts with `prefix` as trainable or frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (n, t) in self.names.iter().zip(self.trainable.iter_mut()) {
            if n.starts_with(prefix) {
                *t = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    /// Overwrites every parameter whose name appears in `entries`. Shapes must
    /// match; names absent from this store are an error, names absent from
    /// `entries` keep their current values. Returns the number loaded.
    pub fn load<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize> {
        let mut n = 0;
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Lookup(String::from(name)))?;
            let cur = &mut self.tensors[id.0];
            if cur.shape() != t.shape() {
                return Err(shape_err("load", cur.shape(), t.shape()));
            }
            *cur = t.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Names with the given namespace prefix, in insertion order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names
            .iter()
            .map(String::as_str)
            .filter(move |n| n.starts_with(prefix))
    }
}

/// Creates parameters under a dotted prefix using a seeded generator.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: String::from(prefix),
        }
    }

    /// A child initialiser whose names are `prefix.name.*`.
    pub fn sub(&mut self, name: &str) -> Init<'_> {
        Init {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn path(&self, name: &str) -> String {
        format!("{}.{}", self.prefix, name)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let p = self.path(name);
        self.store.insert(p, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let p = self.path(name);
        self.store.insert(p, Tensor::full(shape, 1.0))
    }

    /// Uniform(-b, b) with `b = gain * sqrt(3 / fan_in)`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let bound = gain * libm::sqrt(3.0 / fan_in as f64);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        let p = self.path(name);
        self.store.insert(p, t)
    }
}
