use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{contract, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::Rng;

/// Position of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in a stable registration order. The order is the
/// serialization order of checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Graph handles for every entry of a store, from [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl core::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.add_with(name, tensor, true)
    }

    pub fn add_with(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Replaces a tensor, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.tensor.shape() != tensor.shape() {
            return Err(contract(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.tensor.shape(),
                tensor.shape()
            )));
        }
        let mut tensor = tensor;
        tensor.requires_grad = false;
        slot.tensor = tensor;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.find(name).ok_or_else(|| contract(format!("unknown parameter {name}")))?;
        self.set(id, tensor)
    }

    /// Records every entry on `g`; trainable entries as gradient leaves,
    /// frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| if e.trainable { g.param(&e.tensor) } else { g.constant(e.tensor.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Gradients of the trainable entries, in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.trainable_ids()
            .into_iter()
            .map(|id| grads.get(bound[id]).unwrap_or_else(|| Tensor::zeros(self.get(id).shape())))
            .collect()
    }

    /// Temporarily moves the trainable tensors out for an optimizer step.
    pub fn with_trainable<R>(&mut self, f: impl FnOnce(&mut [Tensor]) -> R) -> R {
        let ids = self.trainable_ids();
        let mut tensors: Vec<Tensor> =
            ids.iter().map(|&id| core::mem::replace(&mut self.entries[id.0].tensor, Tensor::scalar(0.0))).collect();
        let out = f(&mut tensors);
        for (id, t) in ids.into_iter().zip(tensors) {
            self.entries[id.0].tensor = t;
        }
        out
    }

    /// The first `n` entries, keeping their ids.
    pub fn prefix(&self, n: usize) -> ParamStore {
        ParamStore { entries: self.entries[..n].to_vec() }
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.to_string()).collect()
    }
}

pub(crate) fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * normal(rng)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Normal samples redrawn until they fall within two standard deviations.
pub(crate) fn truncated_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z = normal(rng);
            if z.abs() <= 2.0 {
                break std * z;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

pub(crate) fn xavier_uniform(fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("positive extents")
}
