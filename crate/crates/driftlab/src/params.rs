//! Named parameter collections and matching gradient records.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An ordered collection of named tensors (layer weights and biases).
///
/// Names are unique and shapes are fixed once a parameter is added; updates
/// replace values, never shapes. Iteration order is insertion order, which
/// also fixes the snapshot record order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor<T>) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    /// Replaces the value of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(Error::shape(
                "ParamSet::set",
                format!(
                    "`{name}` has shape {:?}, new value {:?}",
                    self.entries[i].1.shape(),
                    value.shape()
                ),
            ));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// True when the other set has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// New set with every tensor replaced by zeros of the same shape.
    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Merges `other` into a new set with every name prefixed.
    pub fn merged(sections: &[(&str, &ParamSet<T>)]) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for (prefix, set) in sections {
            for (name, value) in set.iter() {
                out.add(format!("{prefix}{name}"), value.clone())?;
            }
        }
        Ok(out)
    }

    /// Extracts the parameters whose names start with `prefix`, stripping it.
    pub fn section(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| {
                    n.strip_prefix(prefix)
                        .map(|rest| (rest.to_string(), t.clone()))
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect(),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients plus the scalar loss they came from.
///
/// Shapes mirror the originating [`ParamSet`] one-to-one.
#[derive(Debug, Clone)]
pub struct GradRecord<T: Real> {
    pub loss: T,
    grads: ParamSet<T>,
}

impl<T: Real> GradRecord<T> {
    pub fn new(loss: T, grads: ParamSet<T>) -> Self {
        GradRecord { loss, grads }
    }

    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        GradRecord {
            loss: T::zero(),
            grads: params.zeros_like(),
        }
    }

    pub fn grads(&self) -> &ParamSet<T> {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.grads
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut p = ParamSet::<f64>::new();
        p.add("w0", Tensor::zeros(&[2, 2])).unwrap();
        assert!(p.add("w0", Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn set_preserves_shape() {
        let mut p = ParamSet::<f64>::new();
        p.add("w0", Tensor::zeros(&[2, 2])).unwrap();
        assert!(p.set("w0", Tensor::zeros(&[2, 3])).is_err());
        assert!(p.set("w0", Tensor::zeros(&[2, 2])).is_ok());
    }

    #[test]
    fn merge_and_section_round_trip() {
        let mut a = ParamSet::<f64>::new();
        a.add("w0", Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        let mut b = ParamSet::<f64>::new();
        b.add("w0", Tensor::from_vec(&[1], vec![2.0]).unwrap())
            .unwrap();
        let merged = ParamSet::merged(&[("old.", &a), ("cur.", &b)]).unwrap();
        assert_eq!(merged.len(), 2);
        let back = merged.section("cur.");
        assert_eq!(back.get("w0").unwrap().data(), &[2.0]);
    }
}
