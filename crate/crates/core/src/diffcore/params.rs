use indexmap::IndexMap;

use super::DenseArray;
use crate::error::{Error, Result};

/// Named trainable arrays with a gradient buffer of identical shape for
/// each entry. Iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, DenseArray>,
    grads: IndexMap<String, DenseArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.grads
            .insert(name.clone(), DenseArray::zeros(value.shape()));
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&DenseArray> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Option<&DenseArray> {
        self.grads.get(name)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.grads.get_mut(name)
    }

    /// Removes a gradient buffer. Only useful to exercise the optimizers'
    /// missing-gradient checks.
    pub fn drop_grad(&mut self, name: &str) -> Option<DenseArray> {
        self.grads.shift_remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseArray)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Pairs every entry with its gradient.
    pub(crate) fn entries_with_grads(
        &mut self,
    ) -> Result<Vec<(&str, &mut DenseArray, &DenseArray)>> {
        let grads = &self.grads;
        self.entries
            .iter_mut()
            .map(|(name, value)| {
                let g = grads
                    .get(name)
                    .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
                if g.shape() != value.shape() {
                    return Err(Error::shape(
                        "ParamSet",
                        format!("gradient of `{name}` is {:?}, value is {:?}", g.shape(), value.shape()),
                    ));
                }
                Ok((name.as_str(), value, g))
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for (name, value) in &self.entries {
            match self.grads.get_mut(name) {
                Some(g) => g.fill(0.0),
                None => {
                    self.grads.insert(name.clone(), DenseArray::zeros(value.shape()));
                }
            }
        }
    }

    /// Adds `scale * delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64], scale: f64) -> Result<()> {
        let g = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
        if g.len() != delta.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("`{name}` has {} values, delta has {}", g.len(), delta.len()),
            ));
        }
        for (a, d) in g.data_mut().iter_mut().zip(delta) {
            *a += scale * d;
        }
        Ok(())
    }

    /// Flattens all values in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|a| a.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries
            .keys()
            .flat_map(|k| self.grads[k].data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.entries.values().map(DenseArray::len).sum();
        if total != flat.len() {
            return Err(Error::shape(
                "set_flat_values",
                format!("expected {total} values, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        for v in self.entries.values_mut() {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(DenseArray::len).sum()
    }

    /// True when both sets hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Values only, bitwise.
    pub fn values_equal(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self
                .entries
                .values()
                .zip(other.entries.values())
                .all(|(a, b)| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Deep, independent copy of `params`, gradients included.
pub fn clone_params(params: &ParamSet) -> ParamSet {
    params.clone()
}
