use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SplitModelSpec;
use crate::nn::{backward, forward, sgd_step, softmax_cross_entropy, ForwardTrace};
use crate::protocol::message::{ClientModelUpload, GradDown, SmashedUpload};
use crate::tensor::{ParamSet, Tensor};

/// Which batch of an `h`-window is uploaded, and with which client model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadTrigger {
    /// The window's last batch, run through the post-window client model.
    #[default]
    WindowEnd,
    /// The window's first batch (local counter `m` with `m mod h == 0`),
    /// with the activations computed before that batch's local step.
    WindowStart,
}

#[derive(Debug, Clone)]
struct Pending {
    batch_id: u64,
    trace: ForwardTrace,
}

/// One device: its copy of the client-side model and optional aux head.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub x_c: ParamSet,
    pub a_c: Option<ParamSet>,
    /// Local batches processed since the last broadcast.
    pub m: usize,
    pending: Option<Pending>,
}

/// Outcome of one local `h`-window.
#[derive(Debug, Clone)]
pub struct LocalWindow {
    pub upload: SmashedUpload,
    /// Aux-head loss of every local step.
    pub losses: Vec<f64>,
    /// Squared norm of every local stochastic gradient over `(x_c, a_c)`.
    pub grad_sq_norms: Vec<f64>,
}

/// Outcome of one baseline client step.
#[derive(Debug, Clone, Copy)]
pub struct BaselineStep {
    pub grad_sq_norm: f64,
}

impl ClientState {
    pub fn new(id: usize, x_c: ParamSet, a_c: Option<ParamSet>) -> Self {
        Self {
            id,
            x_c,
            a_c,
            m: 0,
            pending: None,
        }
    }

    /// Installs the round's global models and resets the local counter.
    pub fn receive_broadcast(&mut self, x_c: &ParamSet, a_c: Option<&ParamSet>) {
        self.x_c = x_c.clone();
        self.a_c = a_c.cloned();
        self.m = 0;
        self.pending = None;
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn model_upload(&self) -> ClientModelUpload {
        ClientModelUpload {
            client: self.id,
            x_c: self.x_c.clone(),
            a_c: self.a_c.clone(),
        }
    }
}

fn aux_of<'a>(spec: &'a SplitModelSpec, client: &ClientState) -> Result<&'a [crate::nn::LayerSpec]> {
    match (&spec.aux_head, &client.a_c) {
        (Some(head), Some(_)) => Ok(head),
        _ => Err(Error::config(
            "model.aux_head",
            format!("client {} has no auxiliary head", client.id),
        )),
    }
}

/// One local step on `(x_c, a_c)` against the aux loss. Returns the
/// pre-step smashed data, the loss and the squared gradient norm.
fn local_step(
    spec: &SplitModelSpec,
    client: &mut ClientState,
    x: &Tensor,
    labels: &[usize],
    eta: f64,
) -> Result<(Tensor, f64, f64)> {
    let head = aux_of(spec, client)?;
    let a_c = client.a_c.as_ref().expect("checked");
    let (smashed, c_trace) = forward(&spec.client_stack, &client.x_c, x)?;
    let (logits, a_trace) = forward(head, a_c, &smashed)?;
    let (loss, d_logits) = softmax_cross_entropy(&logits, labels)?;
    let (g_a, d_smashed) = backward(head, a_c, a_trace, &d_logits)?;
    let (g_c, _) = backward(&spec.client_stack, &client.x_c, c_trace, &d_smashed)?;
    let sq = g_c.sq_norm() + g_a.sq_norm();
    client.x_c = sgd_step(&client.x_c, &g_c, eta)?;
    client.a_c = Some(sgd_step(a_c, &g_a, eta)?);
    client.m += 1;
    Ok((smashed, loss, sq))
}

/// Runs one window of local steps and emits its single smashed upload.
///
/// `window` holds `(inputs, labels)` batches in order; `first_batch_id`
/// identifies the first of them.
pub fn client_local_window(
    spec: &SplitModelSpec,
    client: &mut ClientState,
    window: &[(Tensor, Vec<usize>)],
    first_batch_id: u64,
    eta: f64,
    trigger: UploadTrigger,
) -> Result<LocalWindow> {
    aux_of(spec, client)?;
    if window.is_empty() {
        return Err(Error::usage("empty local window"));
    }
    let mut losses = Vec::with_capacity(window.len());
    let mut grad_sq_norms = Vec::with_capacity(window.len());
    let mut first_smashed = None;
    for (x, y) in window {
        let (smashed, loss, sq) = local_step(spec, client, x, y, eta)?;
        first_smashed.get_or_insert(smashed);
        losses.push(loss);
        grad_sq_norms.push(sq);
    }
    let upload = match trigger {
        UploadTrigger::WindowEnd => {
            let (x, y) = window.last().expect("non-empty");
            let (activations, _) = forward(&spec.client_stack, &client.x_c, x)?;
            SmashedUpload {
                client: client.id,
                batch_id: first_batch_id + window.len() as u64 - 1,
                activations,
                labels: y.clone(),
            }
        }
        UploadTrigger::WindowStart => SmashedUpload {
            client: client.id,
            batch_id: first_batch_id,
            activations: first_smashed.expect("non-empty"),
            labels: window[0].1.clone(),
        },
    };
    Ok(LocalWindow {
        upload,
        losses,
        grad_sq_norms,
    })
}

/// Baseline client forward: computes the smashed upload and keeps the trace
/// until the matching gradient comes back.
pub fn client_forward_baseline(
    spec: &SplitModelSpec,
    client: &mut ClientState,
    x: &Tensor,
    labels: &[usize],
    batch_id: u64,
) -> Result<SmashedUpload> {
    if let Some(p) = &client.pending {
        return Err(Error::protocol(format!(
            "client {} still awaits the gradient for batch {}",
            client.id, p.batch_id
        )));
    }
    let (activations, trace) = forward(&spec.client_stack, &client.x_c, x)?;
    client.pending = Some(Pending { batch_id, trace });
    Ok(SmashedUpload {
        client: client.id,
        batch_id,
        activations,
        labels: labels.to_vec(),
    })
}

/// Baseline client backward from the server's smashed-data gradient, then an
/// SGD step on `x_c`.
pub fn client_step_baseline(
    spec: &SplitModelSpec,
    client: &mut ClientState,
    grad_down: &GradDown,
    eta: f64,
) -> Result<BaselineStep> {
    if grad_down.client != client.id {
        return Err(Error::protocol(format!(
            "gradient for client {} delivered to client {}",
            grad_down.client, client.id
        )));
    }
    let pending = match client.pending.take() {
        Some(p) if p.batch_id == grad_down.batch_id => p,
        Some(p) => {
            let expected = p.batch_id;
            client.pending = Some(p);
            return Err(Error::protocol(format!(
                "client {}: gradient for batch {} but batch {expected} is pending",
                client.id, grad_down.batch_id
            )));
        }
        None => {
            return Err(Error::protocol(format!(
                "client {}: gradient for batch {} with nothing pending",
                client.id, grad_down.batch_id
            )))
        }
    };
    let (g_c, _) = backward(&spec.client_stack, &client.x_c, pending.trace, &grad_down.d_smashed)?;
    let grad_sq_norm = g_c.sq_norm();
    client.x_c = sgd_step(&client.x_c, &g_c, eta)?;
    client.m += 1;
    Ok(BaselineStep { grad_sq_norm })
}
