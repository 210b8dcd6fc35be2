//! Named parameter registry with freeze flags.
//!
//! Parameters are stored in insertion order; iteration order is therefore
//! deterministic and forms the canonical enumeration used by checkpoints
//! and parameter accounting.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// A named model parameter with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub path: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// Registry of all parameters of one model, keyed by unique path.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, path: &str, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(path) {
            return Err(CoreError::Contract(alloc::format!(
                "duplicate parameter path `{path}`"
            )));
        }
        let id = self.params.len();
        self.params.push(Parameter {
            path: String::from(path),
            tensor,
            trainable: true,
            grad: None,
        });
        self.index.insert(String::from(path), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id_of(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn by_path(&self, path: &str) -> Option<&Parameter> {
        self.id_of(path).map(|id| &self.params[id])
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut Parameter> {
        self.id_of(path).map(move |id| &mut self.params[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.path.as_str())
    }

    /// Remove a parameter by path. Ids of later parameters shift down;
    /// callers must not hold ids across removals.
    pub fn remove(&mut self, path: &str) -> Option<Parameter> {
        let id = self.index.remove(path)?;
        let removed = self.params.remove(id);
        for (i, p) in self.params.iter().enumerate() {
            self.index.insert(p.path.clone(), i);
        }
        Some(removed)
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        match self.by_path_mut(path) {
            Some(p) => {
                p.trainable = trainable;
                Ok(())
            }
            None => Err(CoreError::Contract(alloc::format!(
                "unknown parameter path `{path}`"
            ))),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `delta` into the stored gradient of parameter `id`.
    pub fn accumulate_grad(&mut self, id: usize, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id];
        if p.tensor.shape() != delta.shape() {
            return Err(CoreError::Contract(alloc::format!(
                "grad shape {:?} mismatches parameter `{}` shape {:?}",
                delta.shape(),
                p.path,
                p.tensor.shape()
            )));
        }
        match &mut p.grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            None => p.grad = Some(delta.clone()),
        }
        Ok(())
    }

    pub fn total_count(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel() as u64)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_path_rejected() {
        let mut ps = ParamSet::new();
        ps.register("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.register("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn counts_respect_freeze_flags() {
        let mut ps = ParamSet::new();
        ps.register("a", Tensor::zeros(&[4, 4])).unwrap();
        ps.register("b", Tensor::zeros(&[4])).unwrap();
        assert_eq!(ps.total_count(), 20);
        ps.set_trainable("a", false).unwrap();
        assert_eq!(ps.trainable_count(), 4);
    }

    #[test]
    fn remove_reindexes() {
        let mut ps = ParamSet::new();
        ps.register("a", Tensor::zeros(&[1])).unwrap();
        ps.register("b", Tensor::zeros(&[2])).unwrap();
        ps.register("c", Tensor::zeros(&[3])).unwrap();
        ps.remove("b").unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.by_path("c").unwrap().tensor.numel(), 3);
        assert_eq!(ps.id_of("c"), Some(1));
    }
}
