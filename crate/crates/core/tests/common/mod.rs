//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use fsl_core::data::{batches, Dataset, Partition};
use fsl_core::model::{fuse, fuse_params, split_params, SplitParams};
use fsl_core::nn::{backward, forward, sgd_step, softmax_cross_entropy, LrSchedule};
use fsl_core::{ParamSet, SplitModelSpec};

/// Neumaier-compensated sum.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Elementwise mean over parameter sets via compensated summation.
pub fn compensated_mean(sets: &[ParamSet]) -> ParamSet {
    let n = sets.len() as f64;
    let mut out = sets[0].clone();
    for (name, t) in out.iter_mut() {
        let parts: Vec<&[f64]> = sets.iter().map(|s| s.get(name).unwrap().data()).collect();
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v = neumaier_sum(parts.iter().map(|p| p[j])) / n;
        }
    }
    out
}

/// Plain minibatch SGD on the fused (client ∘ server) model over client 0's
/// batch sequence; returns the per-step loss and the final split params.
#[allow(clippy::too_many_arguments)]
pub fn fused_sgd(
    spec: &SplitModelSpec,
    init: &SplitParams,
    train: &Dataset,
    partition: &Partition,
    batch_size: usize,
    eta0: f64,
    steps: usize,
    seed: u64,
) -> (Vec<f64>, ParamSet, ParamSet) {
    let stack = fuse(spec);
    let mut params = fuse_params(spec, &init.client, &init.server);
    let lr = LrSchedule::new(eta0).unwrap();
    let mut losses = Vec::with_capacity(steps);
    let mut epoch = 0;
    while losses.len() < steps {
        let plan = batches(partition, 0, batch_size, epoch, seed).unwrap();
        for idx in &plan.batches {
            if losses.len() == steps {
                break;
            }
            let (x, y) = train.batch(idx);
            let (logits, trace) = forward(&stack, &params, &x).unwrap();
            let (loss, d) = softmax_cross_entropy(&logits, &y).unwrap();
            let (g, _) = backward(&stack, &params, trace, &d).unwrap();
            params = sgd_step(&params, &g, lr.lr_at(epoch)).unwrap();
            losses.push(loss);
        }
        epoch += 1;
    }
    let (c, s) = split_params(spec, &params);
    (losses, c, s)
}

/// Multinomial logistic regression by full-batch gradient descent, written
/// directly over `Vec<f64>`. Returns `(weights, bias)` with weights
/// `[classes][dim]`.
pub fn logistic_regression(ds: &Dataset, iters: usize, lr: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = ds.num_classes();
    let d = ds.inputs().row_len();
    let x = ds.inputs().data();
    let n = ds.len();
    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    for _ in 0..iters {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let z: Vec<f64> = (0..k)
                .map(|c| b[c] + w[c].iter().zip(row).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let p = e[c] / s - if ds.labels()[i] == c { 1.0 } else { 0.0 };
                gb[c] += p / n as f64;
                for j in 0..d {
                    gw[c][j] += p * row[j] / n as f64;
                }
            }
        }
        for c in 0..k {
            b[c] -= lr * gb[c];
            for j in 0..d {
                w[c][j] -= lr * gw[c][j];
            }
        }
    }
    (w, b)
}

pub fn linear_accuracy(model: &(Vec<Vec<f64>>, Vec<f64>), ds: &Dataset) -> f64 {
    let (w, b) = model;
    let d = ds.inputs().row_len();
    let x = ds.inputs().data();
    let correct = (0..ds.len())
        .filter(|&i| {
            let row = &x[i * d..(i + 1) * d];
            let scores: Vec<f64> = (0..w.len())
                .map(|c| b[c] + w[c].iter().zip(row).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            let best = (0..scores.len())
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                .unwrap();
            best == ds.labels()[i]
        })
        .count();
    correct as f64 / ds.len() as f64
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
