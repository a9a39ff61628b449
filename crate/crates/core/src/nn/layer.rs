use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// One layer of a sequential stack. Shapes are per example (no batch axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// `y = W x + b`, weight shape `[out, in]`.
    Dense {
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(rename = "out")]
        out_features: usize,
    },
    Relu,
    /// `[C, H, W]` to `[C*H*W]`.
    Flatten,
    /// Valid-padding 2-D convolution with square kernel, weight shape
    /// `[out_channels, in_channels, kernel, kernel]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Conv2d { .. } => "conv2d",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Number of weights plus biases.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => in_features * out_features + out_features,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerSpec::Relu | LayerSpec::Flatten => 0,
        }
    }

    /// Output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err("dense extents must be positive".into());
                }
                if input != [in_features] {
                    return Err(format!("dense expects input [{in_features}], got {input:?}"));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return Err("flatten of an empty shape".into());
                }
                Ok(vec![input.iter().product()])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err("conv2d extents must be positive".into());
                }
                let &[c, h, w] = input else {
                    return Err(format!("conv2d expects [C, H, W] input, got {input:?}"));
                };
                if c != in_channels {
                    return Err(format!("conv2d expects {in_channels} channels, got {c}"));
                }
                if h < kernel || w < kernel {
                    return Err(format!("conv2d kernel {kernel} larger than input {h}x{w}"));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
        }
    }
}

/// Per-layer input shapes followed by the final output shape
/// (`layers.len() + 1` entries).
pub fn infer_shapes(stack: &[LayerSpec], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(stack.len() + 1);
    shapes.push(input.to_vec());
    for (i, layer) in stack.iter().enumerate() {
        let next = layer
            .output_shape(shapes.last().expect("non-empty"))
            .map_err(|msg| Error::config(format!("layer[{i}] ({})", layer.name()), msg))?;
        shapes.push(next);
    }
    Ok(shapes)
}

pub fn output_shape(stack: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    Ok(infer_shapes(stack, input)?.pop().expect("non-empty"))
}

pub fn stack_param_count(stack: &[LayerSpec]) -> usize {
    stack.iter().map(LayerSpec::param_count).sum()
}

pub fn weight_name(index: usize) -> String {
    format!("{index:03}.weight")
}

pub fn bias_name(index: usize) -> String {
    format!("{index:03}.bias")
}

/// Stable fingerprint of a stack; traces carry it so they cannot be replayed
/// against a different stack.
pub(crate) fn fingerprint(stack: &[LayerSpec]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    stack.hash(&mut h);
    h.finish()
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(
    stack: &[LayerSpec],
    input: &[usize],
    rng: &mut R,
) -> Result<ParamSet> {
    infer_shapes(stack, input)?;
    let mut params = ParamSet::new();
    for (i, layer) in stack.iter().enumerate() {
        let (wshape, fan_in, fan_out, out) = match *layer {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => (vec![out_features, in_features], in_features, out_features, out_features),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
                out_channels,
            ),
            LayerSpec::Relu | LayerSpec::Flatten => continue,
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let n: usize = wshape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        params.insert(weight_name(i), Tensor::new(w, wshape)?);
        params.insert(bias_name(i), Tensor::zeros(&[out]));
    }
    Ok(params)
}
