//! Named parameter store.
//!
//! Models register each weight once under a stable name and get back a
//! handle. A forward pass binds the whole store onto a fresh tape as leaf
//! tensors; after backward, gradients are collected per handle in
//! registration order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn insert_randn(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut CounterRng,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(rng.normal() * std)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, T::from_f64(v)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Mutable values in registration order (optimizer update path).
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    /// Export as (name, f32 tensor) pairs in registration order.
    pub fn export(&self) -> Vec<(String, Tensor<f32>)> {
        self.names.iter().cloned().zip(self.values.iter().map(|v| v.to_f32())).collect()
    }

    /// Overwrite values from (name, tensor) pairs; every registered
    /// parameter must be present with a matching shape.
    pub fn import(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor<f32>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Format(format!("checkpoint missing parameter '{name}'"))
            })?;
            if src.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter '{name}' shape {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = Tensor::new(
                src.shape().to_vec(),
                src.data().iter().map(|&x| T::from_f64(x as f64)).collect(),
            )?;
        }
        Ok(())
    }

    /// Bind every parameter as a leaf on the tape.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let ids = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Binding { ids }
    }

    /// Collect gradients for every parameter in registration order.
    pub fn collect_grads(
        &self,
        binding: &Binding,
        grads: &Gradients<T>,
        tape: &Tape<T>,
    ) -> Vec<Tensor<T>> {
        binding.ids.iter().map(|&id| grads.get(id, tape)).collect()
    }
}

pub struct Binding {
    ids: Vec<VarId>,
}

impl Binding {
    /// Bind pre-existing tape variables in parameter registration order
    /// (used by gradient checks that manage their own leaves).
    pub fn from_vars(ids: Vec<VarId>) -> Self {
        Self { ids }
    }

    pub fn var(&self, id: ParamId) -> VarId {
        self.ids[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_import_round_trip() {
        let mut rng = CounterRng::new(1);
        let mut store = ParamStore::<f32>::new();
        store.insert_randn("w", &[3, 2], 0.5, &mut rng);
        store.insert_zeros("b", &[2]);
        let exported = store.export();

        let mut other = ParamStore::<f32>::new();
        other.insert_zeros("w", &[3, 2]);
        other.insert_zeros("b", &[2]);
        other.import(&exported).unwrap();
        assert_eq!(other.export(), exported);
    }

    #[test]
    fn import_rejects_missing_and_mismatched() {
        let mut store = ParamStore::<f32>::new();
        store.insert_zeros("w", &[2, 2]);
        assert!(store.import(&[]).is_err());
        let bad = vec![("w".to_string(), Tensor::<f32>::zeros(&[3, 3]))];
        assert!(store.import(&bad).is_err());
    }
}
