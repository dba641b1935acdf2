use std::collections::BTreeMap;

use super::{NnError, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Named parameters, each with a same-shape gradient accumulator.
///
/// Iteration order is the lexicographic order of names, so anything that walks the set
/// (optimizers, checkpoint writers) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<(), NnError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::Param(format!("parameter {name} already defined")));
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param, NnError> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::Param(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, NnError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NnError::Param(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2, NnError> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2, NnError> {
        Ok(&self.get(name)?.grad)
    }

    /// Replaces a parameter value; the shape is fixed at insertion.
    pub fn set_value(&mut self, name: &str, value: Tensor2) -> Result<(), NnError> {
        let p = self.get_mut(name)?;
        value.expect_shape(p.value.shape(), name)?;
        p.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor2) -> Result<(), NnError> {
        self.get_mut(name)?.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.values().all(|p| p.grad.is_finite())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.data().len()).sum()
    }
}
