//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::HashMap;
use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints, optimizer state and gradient vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Add a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every tensor in `g`. Tensors for which `trainable` returns
    /// false become constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if trainable(n) {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradient for every parameter in store order; zeros where the graph
    /// produced none.
    pub fn collect_grads(&self, grads: &mut Gradients, bound: &Bound) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// SHA-256 over names, shapes and bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Declares parameters either by initializing them into a fresh store or by
/// looking them up in an existing one, collecting every mismatch.
pub(crate) enum Builder<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut Rng,
    },
    Attach {
        store: &'a ParamStore,
        errors: Vec<String>,
    },
}

impl<'a> Builder<'a> {
    pub(crate) fn init(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Builder::Init { store, rng }
    }

    pub(crate) fn attach(store: &'a ParamStore) -> Self {
        Builder::Attach {
            store,
            errors: Vec::new(),
        }
    }

    pub(crate) fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce(&mut Rng, usize) -> Vec<f64>,
    ) -> ParamId {
        match self {
            Builder::Init { store, rng } => {
                let n = shape.iter().product();
                let data = init(rng, n);
                store.insert(name, Tensor::from_parts(shape.to_vec(), data))
            }
            Builder::Attach { store, errors } => match store.id(name) {
                Some(id) if store.get(id).shape() == shape => id,
                Some(id) => {
                    errors.push(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        store.get(id).shape()
                    ));
                    id
                }
                None => {
                    errors.push(format!("{name}: missing"));
                    ParamId(0)
                }
            },
        }
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self {
            Builder::Attach { errors, .. } if !errors.is_empty() => Err(Error::Checkpoint(format!(
                "incompatible parameters: {}",
                errors.join("; ")
            ))),
            _ => Ok(()),
        }
    }
}

pub(crate) fn zeros(_: &mut Rng, n: usize) -> Vec<f64> {
    vec![0.0; n]
}

pub(crate) fn ones(_: &mut Rng, n: usize) -> Vec<f64> {
    vec![1.0; n]
}

pub(crate) fn normal(std: f64) -> impl FnOnce(&mut Rng, usize) -> Vec<f64> {
    move |rng, n| (0..n).map(|_| rng.normal() * std).collect()
}

pub(crate) fn truncated_normal(std: f64) -> impl FnOnce(&mut Rng, usize) -> Vec<f64> {
    move |rng, n| (0..n).map(|_| rng.truncated_normal(std)).collect()
}

pub(crate) fn uniform(lo: f64, hi: f64) -> impl FnOnce(&mut Rng, usize) -> Vec<f64> {
    move |rng, n| (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attach_reports_every_mismatch() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[2]));
        store.insert("b", Tensor::zeros(&[3]));
        let mut b = Builder::attach(&store);
        b.param("a", &[2], zeros);
        b.param("b", &[4], zeros);
        b.param("c", &[1], zeros);
        let err = b.finish().unwrap_err().to_string();
        assert!(err.contains("b: expected shape [4]"), "{err}");
        assert!(err.contains("c: missing"), "{err}");
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let before = s.checksum();
        s.get_mut(id).data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, s.checksum());
    }
}
