use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Labelled examples; row `i` of `inputs` pairs with `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::data(format!(
                "inputs must have a leading example axis, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::data(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::data(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-example input shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(indices);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Isotropic unit-variance Gaussian blobs.
///
/// Class centres sit on a regular polygon in the first two coordinates (on a
/// line when `dim == 1`) with adjacent centres `sep` apart, so every pair of
/// centres is at least `sep` apart. Centres depend only on
/// `(classes, dim, sep)`, so train and test sets drawn with different seeds
/// share them. Labels are balanced (`i mod classes`) and shuffled.
pub fn gen_gaussian_blobs(
    n: usize,
    classes: usize,
    dim: usize,
    sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || classes == 0 || dim == 0 {
        return Err(Error::config("dataset", "n, classes and dim must be positive"));
    }
    if !(sep > 0.0 && sep.is_finite()) {
        return Err(Error::config("dataset.sep", format!("must be positive, got {sep}")));
    }
    let centers = blob_centers(classes, dim, sep);
    let mut r = rng::stream(seed, rng::DATA, &[]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut r);
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        for &c in &centers[l] {
            let z: f64 = StandardNormal.sample(&mut r);
            data.push(c + z);
        }
    }
    Dataset::new(Tensor::new(data, vec![n, dim])?, labels, classes)
}

fn blob_centers(classes: usize, dim: usize, sep: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if classes == 1 {
                return c;
            }
            if dim == 1 {
                c[0] = k as f64 * sep;
            } else {
                let angle = std::f64::consts::TAU * k as f64 / classes as f64;
                let radius = sep / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                c[0] = radius * angle.cos();
                c[1] = radius * angle.sin();
            }
            c
        })
        .collect()
}

/// Reads a CSV file with a header row; the last column is an integer class
/// label, every other column a numeric feature.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::data("CSV needs at least one feature column and a label column"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        for field in record.iter().take(width - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("line {line}: bad feature `{field}`")))?;
            if !v.is_finite() {
                return Err(Error::data(format!("line {line}: non-finite feature")));
            }
            data.push(v);
        }
        let raw = &record[width - 1];
        let label: usize = raw
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("line {line}: bad label `{raw}`")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::data("CSV has no data rows"));
    }
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let rows = labels.len();
    Dataset::new(Tensor::new(data, vec![rows, width - 1])?, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        let a = gen_gaussian_blobs(50, 3, 4, 5.0, 1).unwrap();
        let b = gen_gaussian_blobs(50, 3, 4, 5.0, 1).unwrap();
        let c = gen_gaussian_blobs(50, 3, 4, 5.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.class_counts().iter().sum::<usize>(), 50);
    }

    #[test]
    fn centers_are_at_least_sep_apart() {
        for (k, d) in [(2, 1), (3, 2), (5, 8), (10, 3)] {
            let c = blob_centers(k, d, 4.0);
            for i in 0..k {
                for j in i + 1..k {
                    let dist: f64 = c[i]
                        .iter()
                        .zip(&c[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 4.0 - 1e-9, "k={k} d={d}: {dist}");
                }
            }
        }
    }

    #[test]
    fn blobs_have_unit_variance_around_centers() {
        let ds = gen_gaussian_blobs(3000, 1, 2, 1.0, 4).unwrap();
        let var: f64 = ds.inputs().data().iter().map(|v| v * v).sum::<f64>() / 6000.0;
        assert!((var - 1.0).abs() < 0.08, "{var}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,b,label\n0.5,1.0,1\n-2,3,0\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.inputs().data(), &[0.5, 1.0, -2.0, 3.0]);
        std::fs::write(&path, "a,label\nx,1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Data(_))));
    }
}
