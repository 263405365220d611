//! Parameter storage, forward-pass sessions and the shared layer vocabulary.
//!
//! Models own [`ParamId`]s into a [`ParamStore`]. A forward pass runs inside a
//! [`Session`], which turns stored tensors into graph leaves on first use and
//! remembers which ones took part so the optimizer can update exactly those.
//! All image tensors are NHWC.

mod layers;

use std::collections::BTreeMap;

use crate::autograd::Var;
use crate::error::{ensure_arg, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use layers::{
    avg_pool2, flip_horizontal, replicate_spatial, upsample_nearest, Activation, BatchNorm,
    Conv2d, LayerNorm, Linear, Norm, NormKind, ResidualBlock, LEAKY_SLOPE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    /// Buffers (running statistics) are stored but never differentiated.
    buffer: bool,
    frozen: bool,
}

/// Named tensors owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor, buffer: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            buffer,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "shape change for {}", e.name);
        e.value = value;
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        !e.buffer && !e.frozen
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Stops gradient flow into every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = true;
            n += 1;
        }
        n
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.buffer && !e.frozen)
            .map(|e| e.value.len())
            .sum()
    }

    /// Every stored tensor by name, including buffers.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrites values by name. Every stored name must be present with a
    /// matching shape; extra names are ignored.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for e in &mut self.entries {
            let Some(t) = named.get(&e.name) else {
                return Err(crate::error::invalid_arg!("missing tensor {}", e.name));
            };
            ensure_arg!(
                t.shape() == e.value.shape(),
                "tensor {} has shape {:?}, expected {:?}",
                e.name,
                t.shape(),
                e.value.shape()
            );
            e.value = t.clone();
        }
        Ok(())
    }

    /// Overwrites the stored tensors named in `named`; every name must exist.
    pub fn load_named_subset(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in named {
            let Some(e) = self.entries.iter_mut().find(|e| &e.name == name) else {
                return Err(crate::error::invalid_arg!("unknown tensor {name}"));
            };
            ensure_arg!(
                t.shape() == e.value.shape(),
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                e.value.shape()
            );
            e.value = t.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State for one forward pass over one [`ParamStore`].
pub struct Session<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<ParamId, Var>,
    pub mode: Mode,
    noise_rng: Option<Rng>,
    frozen: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            mode,
            noise_rng: None,
            frozen: false,
            buffer_updates: Vec::new(),
        }
    }

    /// Attaches a stream for stochastic layers (multiplicative noise).
    pub fn with_noise(mut self, rng: Rng) -> Self {
        self.noise_rng = Some(rng);
        self
    }

    /// Treats every parameter as a constant, for passes that only need
    /// gradients with respect to inputs or another model.
    pub fn with_frozen_params(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn noise_rng(&mut self) -> Option<&mut Rng> {
        self.noise_rng.as_mut()
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let (store, frozen) = (self.store, self.frozen);
        self.vars
            .entry(id)
            .or_insert_with(|| {
                let v = store.get(id).clone();
                if store.is_trainable(id) && !frozen {
                    Var::parameter(v)
                } else {
                    Var::constant(v)
                }
            })
            .clone()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Trainable parameters touched by this session, in id order.
    pub fn used_params(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .filter(|(id, _)| !self.frozen && self.store.is_trainable(**id))
            .map(|(id, v)| (*id, v.clone()))
            .collect()
    }

    pub(crate) fn record_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Running-statistic updates produced by the pass; apply with
    /// [`ParamStore::set`] once the step is accepted.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }
}

/// Weight initialization: zero-mean normal with variance `2 / fan_in`.
pub fn init_weight(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    crate::rng::normal_tensor(rng, shape, (2.0 / fan_in.max(1) as f64).sqrt())
}
