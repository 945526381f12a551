//! Named parameter groups and their binding into a graph.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// An ordered group of named tensors that is optimized (or frozen) as a unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    group: String,
    trainable: bool,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(group: &str, trainable: bool) -> Self {
        Self {
            group: group.to_string(),
            trainable,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(t.with_requires_grad(self.trainable));
        ParamId(self.tensors.len() - 1)
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients reached through `binding` onto the stored tensors.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) -> Result<()> {
        for (t, &node) in self.tensors.iter_mut().zip(&binding.nodes) {
            if let Some(g) = grads.get(node) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Replaces every tensor value, keeping names and order. Shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Validation(alloc::format!(
                "group `{}` expects {} tensors, got {}",
                self.group,
                self.tensors.len(),
                values.len()
            )));
        }
        for ((slot, v), name) in self.tensors.iter_mut().zip(values).zip(&self.names) {
            if slot.shape() != v.shape() {
                return Err(Error::Validation(alloc::format!(
                    "{}.{}: stored shape {:?}, loaded {:?}",
                    self.group,
                    name,
                    slot.shape(),
                    v.shape()
                )));
            }
            *slot = v.with_requires_grad(self.trainable);
        }
        Ok(())
    }

    /// SHA-256 over every tensor's serialized bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.to_bytes());
        }
        h.finalize().into()
    }
}

/// Graph nodes holding one store's tensors, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self { nodes }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

impl Index<ParamId> for Binding {
    type Output = NodeId;
    fn index(&self, id: ParamId) -> &NodeId {
        &self.nodes[id.0]
    }
}

impl Graph {
    /// Inserts every tensor of `store` as a leaf. With `track = false` (or a
    /// frozen store) the leaves are constants and receive no gradient.
    pub fn bind(&mut self, store: &ParamStore, track: bool) -> Result<Binding> {
        let track = track && store.is_trainable();
        let mut nodes = Vec::with_capacity(store.len());
        for t in store.tensors() {
            let leaf = t.clone().with_requires_grad(track);
            nodes.push(self.leaf(leaf)?);
        }
        Ok(Binding { nodes })
    }
}

/// He-uniform initialization: U(−√(6/fan_in), √(6/fan_in)).
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in.max(1) as f64);
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Conv weight `[c_out, c_in, k, k]` with He-uniform values.
pub fn conv_weight<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Tensor {
    he_uniform(&[c_out, c_in, k, k], c_in * k * k, rng)
}
