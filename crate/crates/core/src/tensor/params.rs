use std::collections::BTreeMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        &self.get(name).expect("parameter registered at construction").value
    }

    /// Adds `grad` into the stored gradient of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        self.get_mut(name)?.grad.add_assign(grad)
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let param = self.get_mut(name)?;
        param.value.expect_same_shape(&value, "ParamStore::set_value")?;
        param.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}
