//! Named parameter storage and per-trace binding.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Trace, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable tensors keyed by stable path strings such as
/// `stage1/mta/channel/global/meta2`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    /// Registers a tensor drawn from `U(-bound, bound)`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let t = Tensor::uniform(shape, -bound, bound, rng)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Lazily records parameters from a [`ParamStore`] as leaves on one trace.
#[derive(Debug)]
pub struct Binding<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binding<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
        }
    }

    /// Binding whose listed parameters are already recorded as `vars`.
    pub fn preset(store: &'a ParamStore, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            store,
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&mut self, tr: &mut Trace, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let v = tr.leaf(t.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Collects gradients for every bound parameter into `into`, adding
    /// to existing entries.
    pub fn accumulate(&self, grads: &Gradients, into: &mut BTreeMap<String, Vec<f64>>) {
        for (name, &v) in &self.vars {
            if let Some(g) = grads.data(v) {
                match into.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        into.insert(name.clone(), g.to_vec());
                    }
                }
            }
        }
    }
}
