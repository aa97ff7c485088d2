use indexmap::IndexMap;

use super::{ComputeError, Tensor};

/// Named tensors with stable (insertion) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, ComputeError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ComputeError::DuplicateParam(name));
        }
        let (idx, _) = self.entries.insert_full(name, value);
        Ok(idx)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor) {
        let (k, v) = self.entries.get_index(idx).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> (&str, &mut Tensor) {
        let (k, v) = self
            .entries
            .get_index_mut(idx)
            .expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks that `other` has identical names (in order) and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// `self += scale * other`, layouts must agree.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        assert!(self.same_layout(other), "parameter layouts differ");
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.entries.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|v| v.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(1.0)).unwrap();
        p.insert("a", Tensor::scalar(2.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(3.0)).is_err());
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.index_of("a"), Some(1));
    }

    #[test]
    fn zeros_like_keeps_layout() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[2, 3], 1.5)).unwrap();
        let z = p.zeros_like();
        assert!(p.same_layout(&z));
        assert_eq!(z.global_norm(), 0.0);
    }
}
