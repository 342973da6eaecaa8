//! Named parameter storage shared by all networks of a model variant.
//!
//! Parameters live outside the autodiff tape; each training step binds them
//! into a fresh [`Graph`] either as differentiable leaves (the side being
//! optimised) or as frozen constants (the side held fixed during the
//! alternation). Binding is cached per graph so that a parameter used by
//! several forward paths accumulates one combined gradient.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};

/// Which optimiser group a parameter belongs to. Generators, the attention
/// head, the RGB projector and the weak-label classifier are all updated in
/// the generator-side substep; discriminators in the discriminator substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    name: String,
    value: ArrayD<f32>,
    group: ParamGroup,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Hash of the exact bit patterns of one group; used to assert that a
    /// substep left the other side untouched.
    pub fn group_hash(&self, group: ParamGroup) -> u64 {
        let mut hasher = DefaultHasher::new();
        for e in &self.entries {
            if e.group == group {
                e.name.hash(&mut hasher);
                for &v in e.value.iter() {
                    v.to_bits().hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }

    /// Parameter shapes keyed by name, in creation order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }
}

/// Draws a zero-mean normal array; the initialiser for every convolution
/// and affine weight in the crate.
pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f32) -> ArrayD<f32> {
    let dist = Normal::new(0.0f32, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// A tape plus the parameter bindings made on it.
pub struct Graph<'s> {
    pub tape: Tape<f32>,
    store: &'s ParamStore,
    bindings: Vec<Option<Var>>,
    trainable: Option<ParamGroup>,
}

impl<'s> Graph<'s> {
    /// Graph for a training substep: parameters of `group` become leaves,
    /// everything else binds as frozen constants.
    pub fn training(store: &'s ParamStore, group: ParamGroup) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bindings: vec![None; store.len()],
            trainable: Some(group),
        }
    }

    /// Graph with every parameter frozen; used for inference and evaluation.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bindings: vec![None; store.len()],
            trainable: None,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = match self.trainable {
            Some(group) if self.store.group(id) == group => self.tape.leaf(value),
            _ => self.tape.constant(value),
        };
        self.bindings[id.0] = Some(v);
        v
    }

    /// Gradient of the most recent `backward` root w.r.t. a bound parameter.
    pub fn param_grad(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.bindings[id.0].and_then(|v| self.tape.grad(v))
    }

    /// Clones the gradients of one group out of the graph so the store can
    /// be mutated after the graph is dropped.
    pub fn collect_grads(&self, group: ParamGroup) -> GradSet {
        let mut grads = vec![None; self.store.len()];
        for id in self.store.group_ids(group) {
            grads[id.0] = self.param_grad(id).cloned();
        }
        GradSet { grads }
    }
}

/// Owned per-parameter gradients collected from a [`Graph`].
pub struct GradSet {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl GradSet {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
