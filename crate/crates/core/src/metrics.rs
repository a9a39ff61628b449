//! Evaluation, gradient-norm traces, and the convergence monitors.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SplitModelSpec;
use crate::nn::{argmax_rows, backward, forward, predict, softmax_cross_entropy};
use crate::protocol::StrategyKind;
use crate::rng;
use crate::tensor::{ParamSet, Tensor};

/// Default size of the training subset used for full-batch gradient norms.
pub const DEFAULT_PROBE_SIZE: usize = 512;

const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy of `server ∘ client` (never the aux
/// head). Ties go to the lowest class index.
pub fn evaluate(
    spec: &SplitModelSpec,
    client: &ParamSet,
    server: &ParamSet,
    ds: &Dataset,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk);
        let smashed = predict(&spec.client_stack, client, &x)?;
        let logits = predict(&spec.server_stack, server, &smashed)?;
        let (loss, _) = softmax_cross_entropy(&logits, &y)?;
        loss_sum += loss * chunk.len() as f64;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(Evaluation {
        top1: correct as f64 / ds.len() as f64,
        loss: loss_sum / ds.len() as f64,
    })
}

/// Mean of [`evaluate`] over every server copy paired with the global
/// client model.
pub fn evaluate_global(
    spec: &SplitModelSpec,
    client: &ParamSet,
    servers: &[ParamSet],
    ds: &Dataset,
) -> Result<Evaluation> {
    if servers.is_empty() {
        return Err(Error::usage("no server models"));
    }
    let mut acc = Evaluation { top1: 0.0, loss: 0.0 };
    for s in servers {
        let e = evaluate(spec, client, s, ds)?;
        acc.top1 += e.top1;
        acc.loss += e.loss;
    }
    let n = servers.len() as f64;
    Ok(Evaluation {
        top1: acc.top1 / n,
        loss: acc.loss / n,
    })
}

/// `size` examples drawn without replacement (all of them if fewer).
pub fn probe_subset(ds: &Dataset, size: usize, seed: u64) -> Dataset {
    if size >= ds.len() {
        return ds.clone();
    }
    let mut r = rng::stream(seed, rng::PROBE, &[]);
    let mut idx = rand::seq::index::sample(&mut r, ds.len(), size).into_vec();
    idx.sort_unstable();
    ds.subset(&idx)
}

/// Full-batch squared gradient norms on the probe set:
/// client side is the aux loss over `(x_c, a_c)` when there is an aux head,
/// otherwise the end-to-end loss with respect to `x_c`; server side is the
/// server loss with respect to `x_s` on the client's smashed data. N-copy
/// strategies average over copies.
pub fn probe_grad_sq(
    spec: &SplitModelSpec,
    kind: StrategyKind,
    client: &ParamSet,
    aux: Option<&ParamSet>,
    servers: &[ParamSet],
    probe: &Dataset,
) -> Result<(f64, f64)> {
    if probe.is_empty() || servers.is_empty() {
        return Err(Error::usage("empty probe set or no server models"));
    }
    let all: Vec<usize> = (0..probe.len()).collect();
    let (x, y) = probe.batch(&all);
    let (smashed, c_trace) = forward(&spec.client_stack, client, &x)?;

    let mut server_sq = 0.0;
    let mut d_smashed_sum: Option<Tensor> = None;
    for s in servers {
        let (logits, trace) = forward(&spec.server_stack, s, &smashed)?;
        let (_, d_logits) = softmax_cross_entropy(&logits, &y)?;
        let (g_s, d_smashed) = backward(&spec.server_stack, s, trace, &d_logits)?;
        server_sq += g_s.sq_norm();
        d_smashed_sum = Some(match d_smashed_sum {
            None => d_smashed,
            Some(mut acc) => {
                acc.data_mut()
                    .iter_mut()
                    .zip(d_smashed.data())
                    .for_each(|(a, b)| *a += b);
                acc
            }
        });
    }
    let n = servers.len() as f64;
    server_sq /= n;

    let client_sq = if kind.uses_aux() {
        let (head, a_c) = match (&spec.aux_head, aux) {
            (Some(h), Some(a)) => (h, a),
            _ => {
                return Err(Error::config(
                    "model.aux_head",
                    format!("{kind} needs an auxiliary head"),
                ))
            }
        };
        let (logits, a_trace) = forward(head, a_c, &smashed)?;
        let (_, d_logits) = softmax_cross_entropy(&logits, &y)?;
        let (g_a, d) = backward(head, a_c, a_trace, &d_logits)?;
        let (g_c, _) = backward(&spec.client_stack, client, c_trace, &d)?;
        g_c.sq_norm() + g_a.sq_norm()
    } else if servers.len() == 1 {
        let d = d_smashed_sum.expect("one server");
        backward(&spec.client_stack, client, c_trace, &d)?.0.sq_norm()
    } else {
        // one backward per copy: the norm of the mean is not the mean of norms
        let mut total = 0.0;
        for s in servers {
            let (smashed, trace) = forward(&spec.client_stack, client, &x)?;
            let (logits, s_trace) = forward(&spec.server_stack, s, &smashed)?;
            let (_, d_logits) = softmax_cross_entropy(&logits, &y)?;
            let (_, d) = backward(&spec.server_stack, s, s_trace, &d_logits)?;
            total += backward(&spec.client_stack, client, trace, &d)?.0.sq_norm();
        }
        total / n
    };
    Ok((client_sq, server_sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Client,
    Server,
}

/// Per-round learning rates and full-batch squared gradient norms, with
/// running `Γ_T` and `Σ η_t ‖∇F‖²`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    etas: Vec<f64>,
    client_sq: Vec<f64>,
    server_sq: Vec<f64>,
    gamma: Vec<f64>,
    wsum_client: Vec<f64>,
    wsum_server: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends round `len()`: the rate used and the squared norms at the
    /// round's starting models.
    pub fn push(&mut self, eta: f64, client_sq: f64, server_sq: f64) -> Result<()> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::usage(format!("learning rate must be positive, got {eta}")));
        }
        for v in [client_sq, server_sq] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("gradient norm must be finite and >= 0, got {v}")));
            }
        }
        let last = |v: &Vec<f64>| v.last().copied().unwrap_or(0.0);
        self.gamma.push(last(&self.gamma) + eta);
        self.wsum_client.push(last(&self.wsum_client) + eta * client_sq);
        self.wsum_server.push(last(&self.wsum_server) + eta * server_sq);
        self.etas.push(eta);
        self.client_sq.push(client_sq);
        self.server_sq.push(server_sq);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.etas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.etas.is_empty()
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn grad_sq(&self, side: Side) -> &[f64] {
        match side {
            Side::Client => &self.client_sq,
            Side::Server => &self.server_sq,
        }
    }

    /// `Γ_T = Σ_{t<T} η_t`.
    pub fn gamma(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.gamma[t - 1])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::usage("T must be at least 1"));
        }
        if t > self.len() {
            return Err(Error::usage(format!("T = {t} but only {} rounds recorded", self.len())));
        }
        Ok(())
    }
}

/// `(1/Γ_T) Σ_{t<T} η_t ‖∇F(x^t)‖²`.
pub fn weighted_grad_average(trace: &ConvergenceTrace, side: Side, t: usize) -> Result<f64> {
    trace.check_t(t)?;
    let wsum = match side {
        Side::Client => &trace.wsum_client,
        Side::Server => &trace.wsum_server,
    };
    Ok(wsum[t - 1] / trace.gamma[t - 1])
}

/// Constants for the bound. `grad_bound_sq` is `G²`; `m` is `M` on the
/// client side and `N` on the server side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub loss_gap: f64,
    pub lipschitz: f64,
    pub grad_bound_sq: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValue {
    pub value: f64,
    /// The server-side bound omits its distribution-distance term.
    pub partial: bool,
}

/// Right-hand side of the gradient-norm bound for the first `etas.len()`
/// rounds.
///
/// Client: `4·gap/((2M−1)Γ) + 2M²G₁²L/((2M−1)Γ) · Σ η²`.
/// Server: `4·gap/((2N−1)Γ) + 4G₂²/(2N−1) · (1/Γ) Σ (L N²/2) η²`, without
/// the `η_t Σ_i d_{c,i}^t` term.
pub fn prop_bound_rhs(side: Side, etas: &[f64], c: &BoundConstants) -> Result<BoundValue> {
    if etas.is_empty() {
        return Err(Error::usage("T must be at least 1"));
    }
    if [c.loss_gap, c.lipschitz, c.grad_bound_sq].iter().any(|v| *v < 0.0) || c.m < 1.0 {
        return Err(Error::usage("bound constants must be nonnegative with M >= 1"));
    }
    let gamma: f64 = etas.iter().sum();
    let sum_sq: f64 = etas.iter().map(|e| e * e).sum();
    let denom = 2.0 * c.m - 1.0;
    let first = 4.0 * c.loss_gap / (denom * gamma);
    Ok(match side {
        Side::Client => BoundValue {
            value: first + 2.0 * c.m * c.m * c.grad_bound_sq * c.lipschitz / (denom * gamma) * sum_sq,
            partial: false,
        },
        Side::Server => BoundValue {
            value: first
                + 4.0 * c.grad_bound_sq / denom / gamma * (c.lipschitz * c.m * c.m / 2.0) * sum_sq,
            partial: true,
        },
    })
}

/// Running maxima of per-step squared stochastic-gradient norms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssumptionEstimates {
    pub g1_sq_hat: f64,
    pub g2_sq_hat: f64,
    history: Vec<(f64, f64)>,
}

impl AssumptionEstimates {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds in one round's observations.
    pub fn update(&mut self, client_sq: &[f64], server_sq: &[f64]) {
        let fold = |cur: f64, xs: &[f64]| xs.iter().copied().fold(cur, f64::max);
        self.g1_sq_hat = fold(self.g1_sq_hat, client_sq);
        self.g2_sq_hat = fold(self.g2_sq_hat, server_sq);
        self.history.push((self.g1_sq_hat, self.g2_sq_hat));
    }

    pub fn history(&self) -> &[(f64, f64)] {
        &self.history
    }

    /// No increase of either maximum over the last `fraction` of rounds.
    pub fn plateaued(&self, fraction: f64) -> bool {
        let n = self.history.len();
        let start = n - ((n as f64 * fraction).floor() as usize).min(n);
        if start == 0 {
            return n <= 1;
        }
        let base = self.history[start - 1];
        self.history[start..].iter().all(|&h| h == base)
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub epoch: f64,
    pub comm_rounds: u64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub train_loss: f64,
    pub test_top1: f64,
    pub grad_norm_client: f64,
    pub grad_norm_server: f64,
    #[serde(rename = "gamma_T")]
    pub gamma_t: f64,
    pub weighted_avg_client: f64,
    pub weighted_avg_server: f64,
}

pub const METRICS_COLUMNS: [&str; 12] = [
    "round",
    "epoch",
    "comm_rounds",
    "uplink_bytes",
    "downlink_bytes",
    "train_loss",
    "test_top1",
    "grad_norm_client",
    "grad_norm_server",
    "gamma_T",
    "weighted_avg_client",
    "weighted_avg_server",
];

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
