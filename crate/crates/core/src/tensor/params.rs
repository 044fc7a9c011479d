//! Named parameter collections and their binding to a tape.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{contract_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered set of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, recorded in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: &str, mut t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return contract_err(format!("duplicate parameter name {name}"));
        }
        t.set_requires_grad(true);
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
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

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.tensors[id.0].set_requires_grad(on);
    }

    pub fn freeze_all(&mut self) {
        for t in &mut self.tensors {
            t.set_requires_grad(false);
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding { vars: self.tensors.iter().map(|t| tape.leaf(t)).collect() }
    }

    /// Add the tape's gradients into every trainable parameter.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&binding.vars) {
            if t.requires_grad() {
                tape.write_grad(v, t)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Mutable references to the trainable tensors, in store order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().filter(|t| t.requires_grad()).collect()
    }

    /// SHA-256 over names, shapes and raw value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn entries(&self) -> Vec<(&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors).collect()
    }

    /// Overwrite values from named tensors; every stored name must be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (n, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some(src) = lookup.get(n.as_str()) else {
                return contract_err(format!("checkpoint lacks parameter {n}"));
            };
            if src.shape() != slot.shape() {
                return dim_err(format!("parameter {n}: checkpoint shape {:?}, model shape {:?}", src.shape(), slot.shape()));
            }
            slot.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn digest_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2])).unwrap();
        let d0 = s.digest();
        s.get_mut(id).data_mut()[0] = 1e-300;
        assert_ne!(d0, s.digest());
    }

    #[test]
    fn bind_and_collect() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::full(&[3], 2.0)).unwrap();
        let b = s.add("b", Tensor::full(&[3], 5.0)).unwrap();
        s.set_trainable(b, false);
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape);
        let p = tape.mul(bind.var(a), bind.var(b)).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        s.collect_grads(&tape, &bind).unwrap();
        assert_eq!(s.get(a).grad().unwrap(), &[5.0; 3]);
        assert!(s.get(b).grad().is_none());
        assert_eq!(s.trainable_numel(), 3);
    }
}
