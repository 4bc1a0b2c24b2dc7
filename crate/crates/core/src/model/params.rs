use indexmap::IndexMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Leaf bindings from one forward pass: parameter path to tape node.
pub type Bindings = IndexMap<String, Var>;

/// Named model parameters; a tensor's `requires_grad` flag is its
/// trainability.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<T> {
    params: IndexMap<String, Tensor<T>>,
    /// LoRA target path to adapter scaling.
    adapters: IndexMap<String, f64>,
}

impl<T: Element> Default for ParamTree<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamTree<T> {
    pub fn new() -> Self {
        ParamTree {
            params: IndexMap::new(),
            adapters: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::InvalidConfig(format!(
                "duplicate parameter path `{path}`"
            )));
        }
        self.params.insert(path, t);
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.params.shift_remove(path)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.params
            .get(path)
            .ok_or_else(|| Error::UnknownPath(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::UnknownPath(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// `(path, shape)` for every parameter, in tree order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        self.get_mut(path)?.set_requires_grad(trainable);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.params
            .values_mut()
            .for_each(|t| t.set_requires_grad(false));
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of every bound, trainable parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bindings: &Bindings) -> Result<()> {
        for (path, &var) in bindings {
            if let Some(t) = self.params.get_mut(path) {
                tape.accumulate_into(var, t)?;
            }
        }
        Ok(())
    }

    pub fn adapter_scaling(&self, target: &str) -> Option<f64> {
        self.adapters.get(target).copied()
    }

    pub fn adapter_targets(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub(crate) fn register_adapter(&mut self, target: &str, scaling: f64) {
        self.adapters.insert(target.to_string(), scaling);
    }

    pub(crate) fn unregister_adapter(&mut self, target: &str) -> Option<f64> {
        self.adapters.shift_remove(target)
    }
}
