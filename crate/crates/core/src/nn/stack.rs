//! Forward and backward passes over a sequential layer stack.
//!
//! Activations carry a leading batch axis: a stack with per-example input
//! shape `[d]` consumes tensors of shape `[batch, d]`.

use crate::error::{Error, Result};
use crate::nn::layer::{bias_name, fingerprint, infer_shapes, weight_name, LayerSpec};
use crate::tensor::{ParamSet, Tensor};

/// Cached per-layer inputs from one forward pass.
///
/// Consumed by [`backward`]; a trace can back exactly one backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stack_id: u64,
    inputs: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The stack input this trace was built from.
    pub fn input(&self) -> Option<&Tensor> {
        self.inputs.first()
    }
}

fn layer_params<'a>(
    params: &'a ParamSet,
    index: usize,
    layer: &LayerSpec,
) -> Result<(&'a Tensor, &'a Tensor)> {
    let missing = |what: &str| {
        Error::config(
            format!("layer[{index}] ({})", layer.name()),
            format!("missing parameter `{what}`"),
        )
    };
    let (wn, bn) = (weight_name(index), bias_name(index));
    let w = params.get(&wn).ok_or_else(|| missing(&wn))?;
    let b = params.get(&bn).ok_or_else(|| missing(&bn))?;
    let expect_w: Vec<usize> = match *layer {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => vec![out_features, in_features],
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => vec![out_channels, in_channels, kernel, kernel],
        _ => unreachable!("parameter-free layer"),
    };
    if w.shape() != expect_w.as_slice() || b.shape() != [expect_w[0]] {
        return Err(Error::config(
            format!("layer[{index}] ({})", layer.name()),
            format!(
                "parameter shapes {:?}/{:?} do not match layer (expected {expect_w:?})",
                w.shape(),
                b.shape()
            ),
        ));
    }
    Ok((w, b))
}

/// Runs `input` through `stack`, caching every layer input.
pub fn forward(
    stack: &[LayerSpec],
    params: &ParamSet,
    input: &Tensor,
) -> Result<(Tensor, ForwardTrace)> {
    if input.shape().len() < 2 {
        return Err(Error::config(
            "input",
            format!("expected a batched input, got shape {:?}", input.shape()),
        ));
    }
    infer_shapes(stack, &input.shape()[1..])?;
    let mut inputs = Vec::with_capacity(stack.len());
    let mut x = input.clone();
    for (i, layer) in stack.iter().enumerate() {
        let y = match *layer {
            LayerSpec::Dense { .. } => {
                let (w, b) = layer_params(params, i, layer)?;
                dense_forward(&x, w, b)
            }
            LayerSpec::Relu => relu_forward(&x),
            LayerSpec::Flatten => {
                let rows = x.rows();
                let width = x.row_len();
                x.clone().reshape(vec![rows, width])?
            }
            LayerSpec::Conv2d { stride, .. } => {
                let (w, b) = layer_params(params, i, layer)?;
                conv_forward(&x, w, b, stride)
            }
        };
        inputs.push(std::mem::replace(&mut x, y));
    }
    Ok((
        x,
        ForwardTrace {
            stack_id: fingerprint(stack),
            inputs,
        },
    ))
}

/// Forward pass without keeping a trace.
pub fn predict(stack: &[LayerSpec], params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    forward(stack, params, input).map(|(y, _)| y)
}

/// Backpropagates `upstream` (dL/d output) through the stack.
///
/// Returns parameter gradients shaped like `params` (restricted to the
/// stack's layers) and the gradient with respect to the stack input.
pub fn backward(
    stack: &[LayerSpec],
    params: &ParamSet,
    trace: ForwardTrace,
    upstream: &Tensor,
) -> Result<(ParamSet, Tensor)> {
    if trace.stack_id != fingerprint(stack) || trace.inputs.len() != stack.len() {
        return Err(Error::usage("forward trace does not belong to this stack"));
    }
    let input_shape = trace
        .inputs
        .first()
        .map(|t| t.shape().to_vec())
        .unwrap_or_else(|| upstream.shape().to_vec());
    let batch = input_shape[0];
    let shapes = infer_shapes(stack, &input_shape[1..])?;
    let mut expect_out = vec![batch];
    expect_out.extend_from_slice(shapes.last().expect("non-empty"));
    if upstream.shape() != expect_out.as_slice() {
        return Err(Error::usage(format!(
            "upstream gradient shape {:?} does not match stack output {expect_out:?}",
            upstream.shape()
        )));
    }

    let mut grads = ParamSet::new();
    let mut g = upstream.clone();
    for (i, (layer, x)) in stack.iter().zip(trace.inputs).enumerate().rev() {
        g = match *layer {
            LayerSpec::Dense { .. } => {
                let (w, _) = layer_params(params, i, layer)?;
                let (dw, db, dx) = dense_backward(&x, w, &g);
                grads.insert(weight_name(i), dw);
                grads.insert(bias_name(i), db);
                dx
            }
            LayerSpec::Relu => relu_backward(&x, &g),
            LayerSpec::Flatten => g.reshape(x.shape().to_vec())?,
            LayerSpec::Conv2d { stride, .. } => {
                let (w, _) = layer_params(params, i, layer)?;
                let (dw, db, dx) = conv_backward(&x, w, &g, stride);
                grads.insert(weight_name(i), dw);
                grads.insert(bias_name(i), db);
                dx
            }
        };
    }
    Ok((grads, g))
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = Vec::with_capacity(rows * out);
    for r in 0..rows {
        let xr = &xd[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wr = &wd[o * inp..(o + 1) * inp];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            y.push(dot + bd[o]);
        }
    }
    Tensor::new(y, vec![rows, out]).expect("dense output shape")
}

fn dense_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dw = vec![0.0; out * inp];
    let mut db = vec![0.0; out];
    let mut dx = vec![0.0; rows * inp];
    for r in 0..rows {
        let xr = &xd[r * inp..(r + 1) * inp];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let go = gd[r * out + o];
            if go == 0.0 {
                continue;
            }
            db[o] += go;
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            let wr = &wd[o * inp..(o + 1) * inp];
            for k in 0..inp {
                dwr[k] += go * xr[k];
                dxr[k] += go * wr[k];
            }
        }
    }
    (
        Tensor::new(dw, vec![out, inp]).expect("dw"),
        Tensor::vector(db),
        Tensor::new(dx, x.shape().to_vec()).expect("dx"),
    )
}

fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(data, x.shape().to_vec()).expect("relu shape")
}

fn relu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(data, x.shape().to_vec()).expect("relu grad shape")
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, stride: usize) -> ConvDims {
    let s = x.shape();
    let ws = w.shape();
    let (h, wd, k) = (s[2], s[3], ws[2]);
    ConvDims {
        batch: s[0],
        cin: s[1],
        h,
        w: wd,
        cout: ws[0],
        k,
        ho: (h - k) / stride + 1,
        wo: (wd - k) / stride + 1,
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let d = conv_dims(x, w, stride);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; d.batch * d.cout * d.ho * d.wo];
    for n in 0..d.batch {
        for o in 0..d.cout {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = bd[o];
                    for c in 0..d.cin {
                        for ky in 0..d.k {
                            let iy = oy * stride + ky;
                            let xrow = ((n * d.cin + c) * d.h + iy) * d.w + ox * stride;
                            let wrow = ((o * d.cin + c) * d.k + ky) * d.k;
                            for kx in 0..d.k {
                                acc += xd[xrow + kx] * wd[wrow + kx];
                            }
                        }
                    }
                    y[((n * d.cout + o) * d.ho + oy) * d.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(y, vec![d.batch, d.cout, d.ho, d.wo]).expect("conv output shape")
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize) -> (Tensor, Tensor, Tensor) {
    let d = conv_dims(x, w, stride);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; d.cout];
    let mut dx = vec![0.0; x.len()];
    for n in 0..d.batch {
        for o in 0..d.cout {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let go = gd[((n * d.cout + o) * d.ho + oy) * d.wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    db[o] += go;
                    for c in 0..d.cin {
                        for ky in 0..d.k {
                            let iy = oy * stride + ky;
                            let xrow = ((n * d.cin + c) * d.h + iy) * d.w + ox * stride;
                            let wrow = ((o * d.cin + c) * d.k + ky) * d.k;
                            for kx in 0..d.k {
                                dw[wrow + kx] += go * xd[xrow + kx];
                                dx[xrow + kx] += go * wd[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(dw, w.shape().to_vec()).expect("dw"),
        Tensor::vector(db),
        Tensor::new(dx, x.shape().to_vec()).expect("dx"),
    )
}
