//! Split-model construction: client stack, cut layer, auxiliary head, server
//! stack, plus the fused (centralized) view used as an oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::LABEL_BYTES;
use crate::nn::layer::{bias_name, infer_shapes, init_params, stack_param_count, weight_name};
use crate::nn::LayerSpec;
use crate::protocol::StrategyKind;
use crate::rng;
use crate::tensor::ParamSet;

/// Auxiliary share of total parameters above which validation warns.
pub const AUX_SHARE_WARNING: f64 = 0.10;

/// Declarative split model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitModelSpec {
    /// Per-example input shape, e.g. `[8]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub client_stack: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_head: Option<Vec<LayerSpec>>,
    pub server_stack: Vec<LayerSpec>,
    pub num_classes: usize,
}

/// Generated auxiliary head shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxHeadKind {
    /// Flatten (when needed), hidden dense+relu layers, dense to logits.
    Mlp { hidden: Vec<usize> },
    /// 1x1 convolution reducing the cut activation to `channels`, then an MLP.
    Conv1x1Mlp { channels: usize, hidden: Vec<usize> },
}

impl AuxHeadKind {
    /// Expands to layers for a given cut-layer shape.
    pub fn layers(&self, cut_shape: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
        let mut layers = Vec::new();
        let mut width = match self {
            AuxHeadKind::Mlp { .. } => {
                if cut_shape.len() > 1 {
                    layers.push(LayerSpec::Flatten);
                }
                cut_shape.iter().product()
            }
            AuxHeadKind::Conv1x1Mlp { channels, .. } => {
                let &[c, h, w] = cut_shape else {
                    return Err(Error::config(
                        "aux_head",
                        format!("conv1x1_mlp needs a [C, H, W] cut layer, got {cut_shape:?}"),
                    ));
                };
                layers.push(LayerSpec::conv2d(c, *channels, 1, 1));
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::Flatten);
                channels * h * w
            }
        };
        let hidden = match self {
            AuxHeadKind::Mlp { hidden } | AuxHeadKind::Conv1x1Mlp { hidden, .. } => hidden,
        };
        for &hdim in hidden {
            layers.push(LayerSpec::dense(width, hdim));
            layers.push(LayerSpec::Relu);
            width = hdim;
        }
        layers.push(LayerSpec::dense(width, num_classes));
        Ok(layers)
    }
}

/// Freshly initialised parameters for the three model parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitParams {
    pub client: ParamSet,
    pub aux: Option<ParamSet>,
    pub server: ParamSet,
}

impl SplitModelSpec {
    /// The default small model: `input -> dense(hidden)+relu | cut |
    /// dense(hidden)+relu+dense(classes)`, aux head `dense(classes)`.
    pub fn toy(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            input_shape: vec![input_dim],
            client_stack: vec![LayerSpec::dense(input_dim, hidden), LayerSpec::Relu],
            aux_head: Some(vec![LayerSpec::dense(hidden, num_classes)]),
            server_stack: vec![
                LayerSpec::dense(hidden, hidden),
                LayerSpec::Relu,
                LayerSpec::dense(hidden, num_classes),
            ],
            num_classes,
        }
    }

    pub fn without_aux(mut self) -> Self {
        self.aux_head = None;
        self
    }

    /// Shape of the smashed data (client-stack output) per example.
    pub fn cut_shape(&self) -> Result<Vec<usize>> {
        Ok(infer_shapes(&self.client_stack, &self.input_shape)
            .map_err(|e| prefix_path(e, "client_stack"))?
            .pop()
            .expect("non-empty"))
    }

    /// Checks shape chaining and logits width. Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config("input_shape", "extents must be positive"));
        }
        let cut = self.cut_shape()?;
        let logits = [self.num_classes];
        let server_out = infer_shapes(&self.server_stack, &cut)
            .map_err(|e| prefix_path(e, "server_stack"))?
            .pop()
            .expect("non-empty");
        if server_out != logits {
            return Err(Error::config(
                "server_stack",
                format!("ends in shape {server_out:?}, expected [{}]", self.num_classes),
            ));
        }
        let mut warnings = Vec::new();
        if let Some(aux) = &self.aux_head {
            if aux.is_empty() {
                return Err(Error::config("aux_head", "auxiliary head has no layers"));
            }
            let aux_out = infer_shapes(aux, &cut)
                .map_err(|e| prefix_path(e, "aux_head"))?
                .pop()
                .expect("non-empty");
            if aux_out != logits {
                return Err(Error::config(
                    "aux_head",
                    format!("ends in shape {aux_out:?}, expected [{}]", self.num_classes),
                ));
            }
            let share = self.aux_share();
            if share > AUX_SHARE_WARNING {
                warnings.push(format!(
                    "auxiliary head holds {:.1}% of all parameters (above {:.0}%)",
                    share * 100.0,
                    AUX_SHARE_WARNING * 100.0
                ));
            }
        }
        Ok(warnings)
    }

    pub fn client_param_count(&self) -> usize {
        stack_param_count(&self.client_stack)
    }

    pub fn aux_param_count(&self) -> usize {
        self.aux_head.as_deref().map_or(0, stack_param_count)
    }

    pub fn server_param_count(&self) -> usize {
        stack_param_count(&self.server_stack)
    }

    /// Auxiliary parameters as a fraction of client + aux + server.
    pub fn aux_share(&self) -> f64 {
        let aux = self.aux_param_count() as f64;
        let total = aux + (self.client_param_count() + self.server_param_count()) as f64;
        if total == 0.0 {
            0.0
        } else {
            aux / total
        }
    }
}

fn prefix_path(err: Error, prefix: &str) -> Error {
    match err {
        Error::Config { path, msg } => Error::config(format!("{prefix}.{path}"), msg),
        other => other,
    }
}

/// Initialises all three parts from independent seed substreams.
pub fn build(spec: &SplitModelSpec, seed: u64) -> Result<SplitParams> {
    for w in spec.validate()? {
        log::warn!("{w}");
    }
    let cut = spec.cut_shape()?;
    let client = init_params(
        &spec.client_stack,
        &spec.input_shape,
        &mut rng::stream(seed, rng::CLIENT_INIT, &[]),
    )?;
    let aux = spec
        .aux_head
        .as_deref()
        .map(|a| init_params(a, &cut, &mut rng::stream(seed, rng::AUX_INIT, &[])))
        .transpose()?;
    let server = init_params(
        &spec.server_stack,
        &cut,
        &mut rng::stream(seed, rng::SERVER_INIT, &[]),
    )?;
    Ok(SplitParams {
        client,
        aux,
        server,
    })
}

/// Like [`build`], but checks the spec against a strategy: strategies with a
/// local loss need an auxiliary head, and the others drop it.
pub fn build_for(spec: &SplitModelSpec, strategy: StrategyKind, seed: u64) -> Result<SplitParams> {
    if strategy.uses_aux() && spec.aux_head.is_none() {
        return Err(Error::config(
            "model.aux_head",
            format!("strategy {strategy} requires an auxiliary head"),
        ));
    }
    let mut params = build(spec, seed)?;
    if !strategy.uses_aux() {
        params.aux = None;
    }
    Ok(params)
}

/// Client stack followed by server stack; the auxiliary head is dropped.
pub fn fuse(spec: &SplitModelSpec) -> Vec<LayerSpec> {
    spec.client_stack
        .iter()
        .chain(&spec.server_stack)
        .copied()
        .collect()
}

/// Parameters for [`fuse`]: server layer `j` becomes layer `|client| + j`.
pub fn fuse_params(spec: &SplitModelSpec, client: &ParamSet, server: &ParamSet) -> ParamSet {
    let offset = spec.client_stack.len();
    let mut out = client.clone();
    for (j, layer) in spec.server_stack.iter().enumerate() {
        if !layer.has_params() {
            continue;
        }
        for (src, dst) in [
            (weight_name(j), weight_name(offset + j)),
            (bias_name(j), bias_name(offset + j)),
        ] {
            if let Some(t) = server.get(&src) {
                out.insert(dst, t.clone());
            }
        }
    }
    out
}

/// Inverse of [`fuse_params`].
pub fn split_params(spec: &SplitModelSpec, fused: &ParamSet) -> (ParamSet, ParamSet) {
    let offset = spec.client_stack.len();
    let mut client = ParamSet::new();
    let mut server = ParamSet::new();
    for (i, layer) in spec.client_stack.iter().enumerate() {
        if layer.has_params() {
            for n in [weight_name(i), bias_name(i)] {
                if let Some(t) = fused.get(&n) {
                    client.insert(n, t.clone());
                }
            }
        }
    }
    for (j, layer) in spec.server_stack.iter().enumerate() {
        if layer.has_params() {
            for (src, dst) in [
                (weight_name(offset + j), weight_name(j)),
                (bias_name(offset + j), bias_name(j)),
            ] {
                if let Some(t) = fused.get(&src) {
                    server.insert(dst, t.clone());
                }
            }
        }
    }
    (client, server)
}

/// `(elements, bytes)` of one smashed-data batch: the cut activation plus one
/// label per example.
pub fn smashed_size(
    spec: &SplitModelSpec,
    batch_size: usize,
    bytes_per_element: usize,
) -> Result<(usize, usize)> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    let per_example: usize = spec.cut_shape()?.iter().product();
    let elements = per_example * batch_size;
    Ok((elements, elements * bytes_per_element + batch_size * LABEL_BYTES))
}
