use indexmap::IndexMap;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    /// Gradient accumulator; same shape as `value`.
    pub grad: Tensor<T>,
    /// Buffers (e.g. running statistics) are stored here but never trained.
    pub trainable: bool,
}

/// Named model state in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name.into(), ParamEntry { value, grad, trainable });
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.insert(name, value, true);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.insert(name, value, false);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|e| &e.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a value, keeping its kind. Shapes must match.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(dim_err(
                "set_value",
                format!("`{name}` has shape {:?}, got {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.iter().filter(|(_, e)| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, e)| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Zeroes every accumulator, then copies in the gradients of the
    /// parameters that took part in the recorded graph.
    pub fn load_grads(&mut self, grads: &Gradients<T>) -> Result<()> {
        self.zero_grads();
        for (name, g) in grads.params() {
            let (Some(g), Some(e)) = (g, self.entries.get_mut(name)) else { continue };
            if !e.trainable {
                continue;
            }
            if g.shape() != e.grad.shape() {
                return Err(dim_err(
                    "load_grads",
                    format!("gradient for `{name}` has shape {:?}, expected {:?}", g.shape(), e.grad.shape()),
                ));
            }
            e.grad = g.clone();
        }
        Ok(())
    }

    /// Converts every entry to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry { value: e.value.cast(), grad: e.grad.cast(), trainable: e.trainable },
                    )
                })
                .collect(),
        }
    }
}
