//! Named trainable parameters with a stable flattened view.
//!
//! A [`ParamSet`] holds every tensor the optimizer may update, in insertion
//! order. Gradient vectors, perturbations, and snapshots all use the same
//! flat ordering, so vector algebra over the whole parameter point is plain
//! slice arithmetic.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    total: usize,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
            total: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.total += tensor.numel();
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Contract(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count P across all entries.
    pub fn flat_len(&self) -> usize {
        self.total
    }

    /// Copy of the full parameter vector θ in entry order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite θ from a flat vector of the exact length P.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total {
            return Err(Error::Contract(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                self.total
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// θ += c · delta over the flat view.
    pub fn add_scaled(&mut self, delta: &[f64], c: f64) -> Result<()> {
        if delta.len() != self.total {
            return Err(Error::Contract(format!(
                "delta length {} != parameter count {}",
                delta.len(),
                self.total
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            for (x, d) in t.data_mut().iter_mut().zip(&delta[off..off + n]) {
                *x += c * d;
            }
            off += n;
        }
        Ok(())
    }

    /// Entry boundaries in the flat ordering, for per-tensor gradient scopes.
    pub fn layout(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::with_capacity(self.entries.len());
        let mut off = 0;
        for (name, t) in &self.entries {
            out.push((name.clone(), off..off + t.numel()));
            off += t.numel();
        }
        out
    }

    /// Store per-entry gradients copied out of a flat gradient vector.
    pub fn write_grads(&mut self, flat_grad: &[f64]) -> Result<()> {
        if flat_grad.len() != self.total {
            return Err(Error::Contract(format!(
                "gradient length {} != parameter count {}",
                flat_grad.len(),
                self.total
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.set_grad(flat_grad[off..off + n].to_vec())?;
            off += n;
        }
        Ok(())
    }
}

/// Tape handles for every parameter, registered exactly once per forward
/// pass so gradients for shared parameters accumulate on a single leaf.
pub struct TapeBinding {
    nodes: Vec<NodeId>,
    by_name: HashMap<String, usize>,
}

impl TapeBinding {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Result<TapeBinding> {
        let mut nodes = Vec::with_capacity(params.entries.len());
        let mut by_name = HashMap::new();
        for (name, t) in &params.entries {
            by_name.insert(name.clone(), nodes.len());
            nodes.push(tape.leaf(t)?);
        }
        Ok(TapeBinding { nodes, by_name })
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.by_name
            .get(name)
            .map(|&i| self.nodes[i])
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} not bound on tape")))
    }

    /// Flat gradient vector in the ParamSet's entry order.
    pub fn read_grads(&self, tape: &Tape, params: &ParamSet) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(params.flat_len());
        for (i, (_, t)) in params.entries.iter().enumerate() {
            let g = tape.grad(self.nodes[i])?;
            debug_assert_eq!(g.len(), t.numel());
            out.extend_from_slice(g);
        }
        Ok(out)
    }
}
