use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// A named tensor owned by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Buffers (batchnorm running statistics) are counted but never trained.
    pub trainable: bool,
    /// Pruning mask; `false` entries are held at zero.
    pub mask: Option<Vec<bool>>,
}

impl Parameter {
    /// Entries that count toward the model size: unmasked ones only.
    pub fn effective_len(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|k| **k).count(),
            None => self.value.numel(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered, name-indexed parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert_inner(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            bail!(Config, "duplicate parameter name {:?}", name);
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
            mask: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert_inner(name, value, true)
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert_inner(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|i| &self.params[*i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|i| &mut self.params[*i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(p) => Ok(&p.value),
            None => bail!(Structure, "missing parameter {:?}", name),
        }
    }

    pub fn by_id(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub(crate) fn by_id_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.reindex();
    }

    /// Moves parameters with the given prefix from `other` into `self`.
    pub fn extend_from(&mut self, other: &ParamStore, keep: impl Fn(&str) -> bool) -> Result<()> {
        for p in other.iter().filter(|p| keep(&p.name)) {
            if self.index.contains_key(&p.name) {
                bail!(Config, "duplicate parameter name {:?}", p.name);
            }
            self.index.insert(p.name.clone(), self.params.len());
            self.params.push(p.clone());
        }
        Ok(())
    }

    fn reindex(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    /// Sets a pruning mask and zeroes masked entries.
    pub fn set_mask(&mut self, name: &str, mask: Vec<bool>) -> Result<()> {
        let Some(p) = self.get_mut(name) else {
            bail!(Structure, "missing parameter {:?}", name)
        };
        if mask.len() != p.value.numel() {
            bail!(
                Dimension,
                "mask of {} entries for parameter of {}",
                mask.len(),
                p.value.numel()
            );
        }
        for (v, keep) in p.value.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
        p.mask = Some(mask);
        Ok(())
    }

    /// Registers every parameter on the tape. Frozen bindings record constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable && p.trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Stores gradients for every trainable parameter reached by `grads`.
    /// Masked entries receive zero gradient.
    pub fn absorb(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            p.grad = grads.get(*v).cloned().map(|mut g| {
                if let Some(mask) = &p.mask {
                    for (gv, keep) in g.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *gv = 0.0;
                        }
                    }
                }
                g
            });
        }
    }

    /// Gives every trainable parameter left without a gradient an explicit zero one.
    pub fn fill_missing_grads(&mut self) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.trainable && p.grad.is_none())
        {
            p.grad = Some(Tensor::zeros(p.value.dims(), p.value.dtype()));
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Total stored entries (masked entries excluded).
    pub fn effective_count(&self) -> usize {
        self.params.iter().map(Parameter::effective_len).sum()
    }

    /// SHA-256 over names and raw values, for detecting parameter changes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// Digest restricted to parameters whose names satisfy `pred`.
    pub fn digest_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut sub = ParamStore::new();
        sub.extend_from(self, pred)
            .expect("names unique within a store");
        sub.digest()
    }
}

/// Tape variables for one [`ParamStore`] binding.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        match self.index.get(name) {
            Some(i) => Ok(self.vars[*i]),
            None => bail!(Structure, "parameter {:?} is not bound", name),
        }
    }

    pub fn opt_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|i| self.vars[*i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::zeros(&[2], DType::F32))
            .unwrap();
        assert!(s
            .insert("a.weight", Tensor::zeros(&[2], DType::F32))
            .is_err());
    }

    #[test]
    fn masks_zero_values_and_counts() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        s.set_mask("w", vec![false, true, false, true]).unwrap();
        assert_eq!(s.tensor("w").unwrap().data(), &[0.0, 2.0, 0.0, 4.0]);
        assert_eq!(s.effective_count(), 2);
    }
}
