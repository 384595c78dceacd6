//! Named parameter storage shared by every network.
//!
//! Networks are described by structs holding [`ParamId`]s; the weights
//! themselves live in a [`ParamStore`]. A DINO teacher and student share one
//! network description and differ only in their store.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of one store instance; clones receive a fresh identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// Running statistic (batch-norm mean/variance); never optimized.
    Buffer,
}

#[derive(Debug)]
pub struct ParamEntry<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Debug)]
pub struct ParamStore<E = f32> {
    id: StoreId,
    entries: Vec<ParamEntry<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> Clone for ParamStore<E> {
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    kind: e.kind,
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { id: StoreId::fresh(), entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind, trainable: kind == ParamKind::Weight });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<E>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Parameters the optimizer should update.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.kind == ParamKind::Weight && e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Marks every weight whose name starts with `prefix` (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.kind == ParamKind::Weight && e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Number of scalar weights (buffers excluded), optionally restricted to
    /// a name prefix.
    pub fn count_weights(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn replace(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, replacement has {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Copy of this store in another precision, preserving ids and names.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            id: StoreId::fresh(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore<E>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::State(format!(
                "parameter count differs: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::State(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix with seeded
/// initialization.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, R>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut inner = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Normal initialization truncated at two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| loop {
                let v: f64 = normal.sample(self.rng);
                if v.abs() <= 2.0 * std {
                    break v as f32;
                }
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches");
        self.store.add(self.full_name(name), t, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.add(self.full_name(name), Tensor::full(shape.to_vec(), value), ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.add(self.full_name(name), Tensor::full(shape.to_vec(), value), ParamKind::Buffer)
    }
}
