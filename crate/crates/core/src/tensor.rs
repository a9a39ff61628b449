//! Dense row-major tensors and named parameter collections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::usage(format!("tensor shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::usage(format!(
                "tensor data length {} does not match shape {shape:?} ({expected} elements)",
                data.len()
            )));
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![value; n],
            shape: shape.to_vec(),
        }
    }

    /// A one-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            data,
            shape: vec![n],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (the batch dimension for activations).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::usage(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the given rows into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&self.data[r * w..(r + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { data, shape }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Ordered map from parameter name to tensor.
///
/// Names are unique and iterate in lexicographic order, so layer indices are
/// zero-padded (`003.weight`) to keep that order equal to layer order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// `(count, bytes)` where bytes is `count * bytes_per_element`.
    pub fn size(&self, bytes_per_element: usize) -> (usize, usize) {
        let n = self.param_count();
        (n, n * bytes_per_element)
    }

    /// True iff both sets hold the same names with identical shapes.
    pub fn is_compatible(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "parameter sets are incompatible: [{}] vs [{}]",
                self.names().collect::<Vec<_>>().join(", "),
                other.names().collect::<Vec<_>>().join(", ")
            )))
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &ParamSet) -> Result<ParamSet> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for ((_, t), (_, o)) in out.entries.iter_mut().zip(other.entries.iter()) {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += alpha * b;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.axpy(1.0, other)
    }

    pub fn scale(&self, alpha: f64) -> ParamSet {
        let mut out = self.clone();
        for t in out.entries.values_mut() {
            for v in t.data_mut() {
                *v *= alpha;
            }
        }
        out
    }

    /// Sum of squared entries over every tensor.
    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sq_norm).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// All values concatenated in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Merges two disjoint sets; duplicate names are a usage error.
    pub fn merged(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (k, t) in other.iter() {
            if out.insert(k.clone(), t.clone()).is_some() {
                return Err(Error::usage(format!("duplicate parameter `{k}` in merge")));
            }
        }
        Ok(out)
    }

    /// Keeps entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("000.weight", Tensor::vector(vals.to_vec()));
        p
    }

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![1.0; 5], vec![2, 3]).is_err());
        assert!(Tensor::new(vec![1.0; 6], vec![2, 3]).is_ok());
    }

    #[test]
    fn size_uses_bytes_per_element() {
        let p = set(&[1.0, 2.0, 3.0]);
        assert_eq!(p.size(4), (3, 12));
        assert_eq!(p.size(8), (3, 24));
    }

    #[test]
    fn incompatible_sets_error() {
        let a = set(&[1.0, 2.0]);
        let b = set(&[1.0, 2.0, 3.0]);
        assert!(!a.is_compatible(&b));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn select_rows_gathers() {
        let t = Tensor::new((0..6).map(f64::from).collect(), vec![3, 2]).unwrap();
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
