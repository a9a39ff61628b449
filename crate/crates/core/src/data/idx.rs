//! IDX binary arrays (the MNIST container format).
//!
//! Layout: two zero bytes, an element-type byte (`0x08` = unsigned byte), a
//! dimension count byte, one big-endian `u32` per dimension, then the data in
//! row-major order.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TYPE_U8: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != TYPE_U8 {
        return Err(parse_err(
            2,
            format!("unsupported element type 0x{:02x} (only 0x08 is supported)", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(parse_err(3, "zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let at = 4 + 4 * d;
        let raw: [u8; 4] = bytes
            .get(at..at + 4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| parse_err(at, format!("truncated size of dimension {d}")))?;
        dims.push(u32::from_be_bytes(raw) as usize);
    }
    let header = 4 + 4 * ndims;
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < count {
        return Err(parse_err(
            bytes.len(),
            format!("expected {count} data bytes, found {}", body.len()),
        ));
    }
    if body.len() > count {
        return Err(parse_err(header + count, "trailing bytes after data"));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?)
}

/// Builds a dataset from an image array and a label array, without scaling.
///
/// Three-dimensional image arrays `[n, rows, cols]` become `[n, 1, rows, cols]`.
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Dataset> {
    if labels.dims.len() != 1 {
        return Err(Error::data(format!(
            "label array must be one-dimensional, got {:?}",
            labels.dims
        )));
    }
    let n = images.dims[0];
    if n != labels.dims[0] {
        return Err(Error::data(format!(
            "{n} images but {} labels",
            labels.dims[0]
        )));
    }
    let mut shape = images.dims.clone();
    if shape.len() == 1 {
        shape.push(1);
    } else if shape.len() == 3 {
        shape.insert(1, 1);
    }
    let inputs = Tensor::new(images.data.iter().map(|&b| f64::from(b)).collect(), shape)?;
    let labels: Vec<usize> = labels.data.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

/// Loads an image/label pair and min-max scales each feature to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let ds = dataset_from_idx(&read_idx(images)?, &read_idx(labels)?)?;
    Ok(MinMaxScaler::fit(&ds).apply(&ds))
}

/// Per-feature min-max scaling fitted on one dataset and reusable on others.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(ds: &Dataset) -> Self {
        let w = ds.inputs().row_len();
        let mut min = vec![f64::INFINITY; w];
        let mut max = vec![f64::NEG_INFINITY; w];
        for row in ds.inputs().data().chunks(w) {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    /// Scales features into `[0, 1]`; constant features map to 0 and values
    /// outside the fitted range are clamped.
    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let w = self.min.len();
        let mut inputs = ds.inputs().clone();
        for row in inputs.data_mut().chunks_mut(w) {
            for (j, v) in row.iter_mut().enumerate() {
                let span = self.max[j] - self.min[j];
                *v = if span > 0.0 {
                    ((*v - self.min[j]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Dataset::new(inputs, ds.labels().to_vec(), ds.num_classes()).expect("shape preserved")
    }
}

/// Encodes a `u8` IDX array (used by tests and fixtures).
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, TYPE_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_mnist_images() {
        let data: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
        let bytes = encode_idx(&[2, 28, 28], &data);
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![2, 28, 28]);
        let labels = parse_idx(&encode_idx(&[2], &[3, 7])).unwrap();
        let ds = dataset_from_idx(&arr, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.example_shape(), &[1, 28, 28]);
        assert_eq!(ds.num_classes(), 8);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut bytes = encode_idx(&[1], &[0]);
        bytes[0] = 1;
        assert!(matches!(parse_idx(&bytes), Err(Error::Parse { offset: 0, .. })));
        let mut bytes = encode_idx(&[1], &[0]);
        bytes[2] = 0x0D;
        assert!(matches!(parse_idx(&bytes), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn truncated_header_and_body() {
        let bytes = encode_idx(&[3, 2], &[1, 2, 3, 4, 5, 6]);
        assert!(matches!(parse_idx(&bytes[..6]), Err(Error::Parse { offset: 4, .. })));
        assert!(matches!(parse_idx(&bytes[..14]), Err(Error::Parse { offset: 14, .. })));
    }

    #[test]
    fn load_scales_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, encode_idx(&[3, 2], &[0, 5, 10, 5, 20, 5])).unwrap();
        std::fs::write(&lbl, encode_idx(&[3], &[0, 1, 1])).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.inputs().data(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
    }
}
