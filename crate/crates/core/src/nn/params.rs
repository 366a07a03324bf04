use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

/// Named network parameters, keyed by a dotted path such as `critic.q1.l0.w`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(path)
    }

    pub fn require(&self, path: &str) -> Result<&Tensor<T>, NnError> {
        self.entries
            .get(path)
            .ok_or_else(|| NnError::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` into `self`; keys must not collide.
    pub fn extend(&mut self, other: ParamSet<T>) -> Result<(), NnError> {
        for (k, v) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(NnError::Config(format!("duplicate parameter path `{k}`")));
            }
            self.entries.insert(k, v);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Checks that `other` has the same keys and shapes.
    pub fn check_same_layout(&self, other: &ParamSet<T>) -> Result<(), NnError> {
        if self.entries.len() != other.entries.len() {
            return Err(NnError::Shape(format!(
                "parameter sets differ in size: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (k, v) in &self.entries {
            let o = other
                .entries
                .get(k)
                .ok_or_else(|| NnError::MissingParam(k.clone()))?;
            if o.shape() != v.shape() {
                return Err(NnError::Shape(format!(
                    "parameter `{k}` has shape {:?} vs {:?}",
                    v.shape(),
                    o.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Gradients keyed like the [`ParamSet`] they were computed for.
///
/// A key that is absent stands for an exactly-zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Adds `grad` into the entry for `path`.
    pub fn accumulate(&mut self, path: &str, grad: Tensor<T>) {
        match self.entries.get_mut(path) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + *b;
                }
            }
            None => {
                self.entries.insert(path.to_string(), grad);
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Value of the gradient at `path`, treating missing keys as zero.
    pub fn value_or_zero(&self, path: &str, shape: &[usize]) -> Tensor<T> {
        self.entries
            .get(path)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn norm(&self) -> T {
        self.entries.values().map(|t| t.sum_sq()).sum::<T>().sqrt()
    }

    /// True when every stored gradient is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data().iter().all(|v| *v == T::zero()))
    }
}
