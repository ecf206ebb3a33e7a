//! Neural-network building blocks on top of the autodiff engine:
//! a named parameter store, layer types, initialization, and Adam.

mod layers;

pub mod gradcheck;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Scalar, Tape, Tx};

pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear, ResBlock};

/// Handle to one named array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Arc<ArrayD<T>>,
    pub trainable: bool,
    pub adam_m: Option<ArrayD<T>>,
    pub adam_v: Option<ArrayD<T>>,
}

/// Owns every parameter and buffer of a model family, keyed by unique
/// hierarchical names. Also carries the Adam moment arrays so that a
/// checkpoint of the store round-trips optimizer state.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
            adam_m: None,
            adam_v: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> Arc<ArrayD<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "set_value shape");
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Ids of trainable parameters under a name prefix.
    pub fn trainable_under(&self, prefix: &str) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.trainable && e.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total element count of trainable parameters under a prefix.
    pub fn param_count_under(&self, prefix: &str) -> usize {
        self.entries()
            .filter(|(_, e)| e.trainable && e.name.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; `update_stats` controls
    /// whether running statistics are refreshed (gradient checking turns
    /// this off to keep the forward pass side-effect free).
    Train { update_stats: bool },
    /// Running statistics; no side effects.
    Eval,
}

/// Everything a layer needs during one forward pass: the tape, the
/// parameter store, the mode, and the step-local binding of parameters
/// to tape leaves (a parameter used twice binds to the same leaf so its
/// gradients accumulate).
pub struct Fwd<'t, 's, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'s mut ParamStore<T>,
    pub mode: Mode,
    bindings: HashMap<ParamId, usize>,
}

impl<'t, 's, T: Scalar> Fwd<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Fwd { tape, store, mode, bindings: HashMap::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Tx<'t, T> {
        if let Some(&node) = self.bindings.get(&id) {
            return self.tape.handle(node);
        }
        let leaf = self.tape.leaf_shared(self.store.value(id));
        self.bindings.insert(id, leaf.id);
        leaf
    }

    pub fn constant(&self, v: ArrayD<T>) -> Tx<'t, T> {
        self.tape.leaf(v)
    }

    pub fn constant_shared(&self, v: Arc<ArrayD<T>>) -> Tx<'t, T> {
        self.tape.leaf_shared(v)
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    /// Step-local (parameter, tape leaf) bindings, for routing gradients
    /// back to the store after `backward`.
    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, usize)> + '_ {
        self.bindings.iter().map(|(&p, &n)| (p, n))
    }
}

/// Collects per-parameter gradients from a finished backward pass,
/// keyed and ordered by parameter id.
pub fn param_grads<T: Scalar>(
    fwd_bindings: &[(ParamId, usize)],
    grads: &mut crate::autodiff::Gradients<T>,
) -> std::collections::BTreeMap<ParamId, ArrayD<T>> {
    let mut out = std::collections::BTreeMap::new();
    for &(pid, node) in fwd_bindings {
        if let Some(g) = grads.take_id(node) {
            out.insert(pid, g);
        }
    }
    out
}

/// He-normal initialization for conv/linear weights feeding a ReLU.
pub fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    normal_init(rng, shape, std)
}

pub fn normal_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of_f64(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// Adam with the usual bias correction. Moment arrays live in the
/// parameter store; the step counter lives here.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &std::collections::BTreeMap<ParamId, ArrayD<T>>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let lr = T::of_f64(self.lr);
        let eps = T::of_f64(self.eps);
        let c1 = T::of_f64(1.0 - self.beta1.powi(t));
        let c2 = T::of_f64(1.0 - self.beta2.powi(t));
        let one = T::one();
        for (&pid, g) in grads {
            let e = &mut store.entries[pid.0];
            if !e.trainable {
                continue;
            }
            if e.adam_m.is_none() {
                e.adam_m = Some(ArrayD::zeros(e.value.raw_dim()));
                e.adam_v = Some(ArrayD::zeros(e.value.raw_dim()));
            }
            let m = e.adam_m.as_mut().unwrap();
            let v = e.adam_v.as_mut().unwrap();
            let val = Arc::make_mut(&mut e.value);
            ndarray::Zip::from(val).and(m).and(v).and(g).for_each(|p, m, v, &gi| {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(
    grads: &mut std::collections::BTreeMap<ParamId, ArrayD<T>>,
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for v in g.iter() {
            let f = v.as_f64();
            sq += f * f;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
