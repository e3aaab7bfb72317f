//! Named, ordered parameter collections.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Position of a parameter inside its [`ParameterSet`].
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Private parameters never leave the client that owns them.
    pub private: bool,
}

/// Ordered parameter tensors with stable names, partitioned into a shared
/// segment and a private segment by the `private` flag of each entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        private: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Lookup(format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor,
            private,
        });
        Ok(id)
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

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.entries[id].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.id(name)?;
        Some(&mut self.entries[id].tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn num_values_where(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Copy of the shared segment only, in manifest order.
    pub fn shared_segment(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for e in self.entries.iter().filter(|e| !e.private) {
            out.push(e.name.clone(), e.tensor.clone(), false)
                .expect("names are unique in the source set");
        }
        out
    }

    /// Overwrites every entry of `src` into `self`, matching by name and
    /// shape. Fails before mutating anything on the first divergence.
    pub fn overwrite_from(&mut self, src: &ParameterSet) -> Result<()> {
        let mut targets = Vec::with_capacity(src.len());
        for e in src.entries() {
            let id = self
                .id(&e.name)
                .ok_or_else(|| Error::Protocol(format!("unknown parameter `{}`", e.name)))?;
            if self.entries[id].tensor.shape() != e.tensor.shape() {
                return Err(Error::Protocol(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    e.tensor.shape(),
                    self.entries[id].tensor.shape()
                )));
            }
            if self.entries[id].private {
                return Err(Error::Privacy(e.name.clone()));
            }
            targets.push(id);
        }
        for (id, e) in targets.into_iter().zip(src.entries()) {
            self.entries[id].tensor = e.tensor.clone();
        }
        Ok(())
    }

    /// First parameter whose name, shape or position differs from `other`.
    pub fn schema_divergence(&self, other: &ParameterSet) -> Option<String> {
        for (a, b) in self.entries.iter().zip(other.entries()) {
            if a.name != b.name {
                return Some(a.name.clone());
            }
            if a.tensor.shape() != b.tensor.shape() {
                return Some(a.name.clone());
            }
        }
        match self.len().cmp(&other.len()) {
            std::cmp::Ordering::Greater => Some(self.entries[other.len()].name.clone()),
            std::cmp::Ordering::Less => Some(other.entries[self.len()].name.clone()),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// Zero-filled tensors with this set's shapes, in order.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("a", Tensor::vector(&[1.0, 2.0]), false).unwrap();
        p.push("b", Tensor::vector(&[3.0]), true).unwrap();
        p.push("c", Tensor::zeros(&[2, 2]), false).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.push("a", Tensor::scalar(0.0), false).is_err());
    }

    #[test]
    fn shared_segment_drops_private_entries() {
        let s = sample().shared_segment();
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "c"]);
    }

    #[test]
    fn overwrite_refuses_private_targets_and_bad_shapes() {
        let mut p = sample();
        let mut src = ParameterSet::new();
        src.push("b", Tensor::vector(&[9.0]), false).unwrap();
        assert!(matches!(p.overwrite_from(&src), Err(Error::Privacy(_))));

        let mut src = ParameterSet::new();
        src.push("a", Tensor::vector(&[9.0]), false).unwrap();
        assert!(matches!(p.overwrite_from(&src), Err(Error::Protocol(_))));
        assert_eq!(p.get("a").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn divergence_names_first_mismatch() {
        let p = sample();
        let mut q = sample();
        assert_eq!(p.schema_divergence(&q), None);
        *q.get_mut("c").unwrap() = Tensor::zeros(&[4]);
        assert_eq!(p.schema_divergence(&q).as_deref(), Some("c"));
    }
}
