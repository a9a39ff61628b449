use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

/// `params - eta * grads`, returning a new set.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, eta: f64) -> Result<ParamSet> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::usage(format!("learning rate must be positive, got {eta}")));
    }
    params.axpy(-eta, grads)
}

// Norms within this relative band of the threshold count as already clipped,
// which makes clipping idempotent under rounding.
const CLIP_SLACK: f64 = 1e-12;

/// Rescales `grads` so its global L2 norm is at most `threshold`.
///
/// # Panics
/// If `threshold` is not a positive finite number.
pub fn clip_by_global_norm(grads: &ParamSet, threshold: f64) -> ParamSet {
    assert!(
        threshold > 0.0 && threshold.is_finite(),
        "clip threshold must be positive, got {threshold}"
    );
    let norm = grads.global_norm();
    if norm <= threshold * (1.0 + CLIP_SLACK) {
        grads.clone()
    } else {
        grads.scale(threshold / norm)
    }
}

/// Diminishing step size `eta0 / (1 + t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    eta0: f64,
}

impl LrSchedule {
    pub fn new(eta0: f64) -> Result<Self> {
        if eta0 > 0.0 && eta0.is_finite() {
            Ok(Self { eta0 })
        } else {
            Err(Error::config("eta0", format!("must be positive, got {eta0}")))
        }
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        self.eta0 / (1.0 + t as f64)
    }
}
