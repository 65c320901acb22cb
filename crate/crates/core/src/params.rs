//! Named, ordered parameter collections.
//!
//! Every consumer (optimizer, EMA, checkpoint io, tape binding) iterates
//! parameters in insertion order, so update order is fixed and runs are
//! reproducible bit for bit.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Insert a fresh parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Param(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Param(format!(
                "shape mismatch for {name:?}: have {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Insertion-order iteration; this order is the contract.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names, same order, same shapes.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// Bitwise equality of every tensor (and structure).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_structure(other)
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((_, at), (_, bt))| at.bit_eq(bt))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, t.cast::<U>()).expect("names already unique");
        }
        out
    }

    /// Register every parameter as a gradient leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            ids.push(tape.leaf(t.clone()));
        }
        BoundParams { ids, index: self.index.clone() }
    }

    /// Register every parameter as a constant (no gradients) on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            ids.push(tape.constant(t.clone()));
        }
        BoundParams { ids, index: self.index.clone() }
    }
}

/// Tape handles for a bound `ParamSet`, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::Param(format!("unknown parameter {name:?}")))
    }

    /// Ids in the set's insertion order (matches `ParamSet::iter`).
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::new();
        p.insert("w", t(&[1.0])).unwrap();
        p.insert("a", t(&[2.0])).unwrap();
        p.insert("m", t(&[3.0])).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["w", "a", "m"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", t(&[1.0])).unwrap();
        assert!(p.insert("w", t(&[2.0])).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut p = ParamSet::new();
        p.insert("w", t(&[1.0, 2.0])).unwrap();
        assert!(p.set("w", t(&[1.0])).is_err());
        assert!(p.set("w", t(&[5.0, 6.0])).is_ok());
        assert_eq!(p.get("w").unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn bound_params_resolve_to_tape_values() {
        let mut p = ParamSet::new();
        p.insert("w", t(&[1.5, -2.0])).unwrap();
        let mut tape = Tape::recording();
        let bound = p.bind(&mut tape);
        let id = bound.id("w").unwrap();
        assert!(tape.requires_grad(id));
        assert_eq!(tape.value(id).data(), &[1.5, -2.0]);
        assert!(bound.id("nope").is_err());
    }

    #[test]
    fn frozen_bind_requires_no_grad() {
        let mut p = ParamSet::new();
        p.insert("w", t(&[1.0])).unwrap();
        let mut tape = Tape::<f64>::recording();
        let bound = p.bind_frozen(&mut tape);
        assert!(!tape.requires_grad(bound.id("w").unwrap()));
    }

    #[test]
    fn bit_eq_detects_single_ulp() {
        let mut a = ParamSet::new();
        a.insert("w", t(&[1.0])).unwrap();
        let mut b = a.clone();
        assert!(a.bit_eq(&b));
        b.get_mut("w").unwrap().data_mut()[0] = f64::from_bits(1.0f64.to_bits() + 1);
        assert!(!a.bit_eq(&b));
        assert!(a.same_structure(&b));
    }
}
