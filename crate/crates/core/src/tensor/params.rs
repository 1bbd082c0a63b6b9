use std::collections::HashMap;
use std::ops::Index;

use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return contract("ParamStore::add", format!("duplicate parameter name {name:?}"));
        }
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.lookup.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Overwrites every parameter from `(name, tensor)` records. Every
    /// parameter must be present exactly once with a matching shape.
    pub fn load_records(&mut self, records: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, tensor) in records {
            let Some(&i) = self.lookup.get(&name) else {
                return Err(Error::Checkpoint(format!("unknown parameter {name:?}")));
            };
            if seen[i] {
                return Err(Error::Checkpoint(format!("parameter {name:?} appears twice")));
            }
            if tensor.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    self.values[i].shape()
                )));
            }
            seen[i] = true;
            self.values[i] = tensor;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter {:?}", self.names[i])));
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect() }
    }

    /// Gradient buffers in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Vec<T>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.get_slice(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
