//! Central finite-difference gradients and the per-layer gradient-check suite.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::layer::{init_params, LayerSpec};
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::stack::{backward, forward, ForwardTrace};
use crate::rng;
use crate::tensor::{ParamSet, Tensor};

/// Signature of a backward pass, so the suite can be pointed at a faulty one.
pub type BackwardFn =
    fn(&[LayerSpec], &ParamSet, ForwardTrace, &Tensor) -> Result<(ParamSet, Tensor)>;

/// Relative-error threshold a layer must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Finite-difference step used by the suite.
pub const GRADCHECK_EPSILON: f64 = 1e-5;
// Denominator floor so near-zero partials compare on absolute error.
const REL_FLOOR: f64 = 1e-6;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::usage(format!("epsilon {epsilon} outside [1e-7, 1e-3]")))
    }
}

fn stack_loss(
    stack: &[LayerSpec],
    params: &ParamSet,
    input: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let (out, _) = forward(stack, params, input)?;
    Ok(softmax_cross_entropy(&out, labels)?.0)
}

/// Central-difference gradient of the cross-entropy loss of `stack` with
/// respect to every parameter.
pub fn finite_diff_grad(
    stack: &[LayerSpec],
    params: &ParamSet,
    input: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<ParamSet> {
    check_epsilon(epsilon)?;
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name).expect("own name").len();
        for i in 0..n {
            let orig = params.get(name).expect("own name").data()[i];
            probe.get_mut(name).expect("own name").data_mut()[i] = orig + epsilon;
            let plus = stack_loss(stack, &probe, input, labels)?;
            probe.get_mut(name).expect("own name").data_mut()[i] = orig - epsilon;
            let minus = stack_loss(stack, &probe, input, labels)?;
            probe.get_mut(name).expect("own name").data_mut()[i] = orig;
            grads.get_mut(name).expect("own name").data_mut()[i] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(grads)
}

/// Central-difference gradient of the loss with respect to the stack input.
pub fn finite_diff_input_grad(
    stack: &[LayerSpec],
    params: &ParamSet,
    input: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    let mut probe = input.clone();
    let mut grad = Tensor::zeros(input.shape());
    for i in 0..input.len() {
        let orig = input.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = stack_loss(stack, params, &probe, labels)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = stack_loss(stack, params, &probe, labels)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Central differences of an arbitrary scalar function at `point`.
pub fn central_diff<F>(f: F, point: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    check_epsilon(epsilon)?;
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + epsilon;
        let plus = f(&probe);
        probe[i] = point[i] - epsilon;
        let minus = f(&probe);
        probe[i] = point[i];
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// One configuration exercised by the suite.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub layer: &'static str,
    pub stack: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub batch: usize,
}

/// Small configurations (at most 64 parameters each) covering every layer kind.
pub fn default_cases() -> Vec<GradCheckCase> {
    vec![
        GradCheckCase {
            layer: "dense",
            stack: vec![LayerSpec::dense(4, 3)],
            input_shape: vec![4],
            batch: 3,
        },
        GradCheckCase {
            layer: "relu",
            stack: vec![LayerSpec::dense(3, 4), LayerSpec::Relu, LayerSpec::dense(4, 3)],
            input_shape: vec![3],
            batch: 4,
        },
        GradCheckCase {
            layer: "flatten",
            stack: vec![
                LayerSpec::conv2d(1, 2, 2, 1),
                LayerSpec::Flatten,
                LayerSpec::dense(8, 3),
            ],
            input_shape: vec![1, 3, 3],
            batch: 2,
        },
        GradCheckCase {
            layer: "conv2d",
            stack: vec![
                LayerSpec::conv2d(2, 2, 2, 2),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(8, 3),
            ],
            input_shape: vec![2, 5, 5],
            batch: 2,
        },
        GradCheckCase {
            layer: "conv2d_1x1",
            stack: vec![
                LayerSpec::conv2d(2, 3, 1, 1),
                LayerSpec::Flatten,
                LayerSpec::dense(12, 2),
            ],
            input_shape: vec![2, 2, 2],
            batch: 2,
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub layer: String,
    pub param_count: usize,
    pub max_rel_error_params: f64,
    pub max_rel_error_input: f64,
}

impl CaseResult {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_params.max(self.max_rel_error_input)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < GRADCHECK_TOLERANCE
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }
}

/// Compares `backward_fn` against finite differences on one case.
pub fn check_case(case: &GradCheckCase, seed: u64, backward_fn: BackwardFn) -> Result<CaseResult> {
    let mut r = rng::stream(seed, "gradcheck", &[]);
    let mut params = init_params(&case.stack, &case.input_shape, &mut r)?;
    // non-zero biases so their gradients are not trivially exercised at 0
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }
    let mut shape = vec![case.batch];
    shape.extend_from_slice(&case.input_shape);
    let n: usize = shape.iter().product();
    let input = Tensor::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect(), shape)?;
    let (out, trace) = forward(&case.stack, &params, &input)?;
    let classes = out.row_len();
    let labels: Vec<usize> = (0..case.batch).map(|_| r.random_range(0..classes)).collect();
    let (_, dlogits) = softmax_cross_entropy(&out, &labels)?;
    let (grads, dx) = backward_fn(&case.stack, &params, trace, &dlogits)?;

    let fd = finite_diff_grad(&case.stack, &params, &input, &labels, GRADCHECK_EPSILON)?;
    let fd_in = finite_diff_input_grad(&case.stack, &params, &input, &labels, GRADCHECK_EPSILON)?;
    if !grads.is_compatible(&fd) {
        return Err(Error::usage(format!(
            "backward returned gradients incompatible with parameters for `{}`",
            case.layer
        )));
    }
    Ok(CaseResult {
        layer: case.layer.to_owned(),
        param_count: params.param_count(),
        max_rel_error_params: max_rel(&grads.flatten(), &fd.flatten()),
        max_rel_error_input: max_rel(dx.data(), fd_in.data()),
    })
}

/// Runs every default case.
pub fn run_suite(seed: u64, backward_fn: BackwardFn) -> Result<GradCheckReport> {
    let cases = default_cases()
        .iter()
        .map(|c| check_case(c, seed, backward_fn))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        epsilon: GRADCHECK_EPSILON,
        tolerance: GRADCHECK_TOLERANCE,
        cases,
    })
}

/// The library backward pass, as a [`BackwardFn`].
pub fn reference_backward(
    stack: &[LayerSpec],
    params: &ParamSet,
    trace: ForwardTrace,
    upstream: &Tensor,
) -> Result<(ParamSet, Tensor)> {
    backward(stack, params, trace, upstream)
}

/// Fault-injection fixture: the reference backward with dense weight
/// gradients negated.
#[doc(hidden)]
pub fn sign_flipped_dense_backward(
    stack: &[LayerSpec],
    params: &ParamSet,
    trace: ForwardTrace,
    upstream: &Tensor,
) -> Result<(ParamSet, Tensor)> {
    let (mut grads, dx) = backward(stack, params, trace, upstream)?;
    for (i, layer) in stack.iter().enumerate() {
        if matches!(layer, LayerSpec::Dense { .. }) {
            let g = grads
                .get_mut(&crate::nn::layer::weight_name(i))
                .expect("dense weight grad");
            for v in g.data_mut() {
                *v = -*v;
            }
        }
    }
    Ok((grads, dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_toy_derivative() {
        let d = central_diff(|w| w[0] * w[0], &[3.0], 1e-5).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn single_logit_pair_matches_sigmoid() {
        // loss = ln(1 + e^{-(w0 - w1)}), d/dw0 = -sigmoid(-(w0 - w1))
        let stack = [LayerSpec::dense(1, 2)];
        let mut p = ParamSet::new();
        p.insert("000.weight", Tensor::new(vec![3.0, 0.0], vec![2, 1]).unwrap());
        p.insert("000.bias", Tensor::zeros(&[2]));
        let x = Tensor::new(vec![1.0], vec![1, 1]).unwrap();
        let fd = finite_diff_grad(&stack, &p, &x, &[0], 1e-5).unwrap();
        let expect = -1.0 / (1.0 + 3.0f64.exp());
        assert!((fd.get("000.weight").unwrap().data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        // zero-weight final layer: the earlier layer cannot affect the loss
        let stack = [LayerSpec::dense(2, 2), LayerSpec::Relu, LayerSpec::dense(2, 2)];
        let mut p = init_params(&stack, &[2], &mut rng::stream(1, "x", &[])).unwrap();
        *p.get_mut("002.weight").unwrap() = Tensor::zeros(&[2, 2]);
        let x = Tensor::new(vec![0.3, -0.7], vec![1, 2]).unwrap();
        let fd = finite_diff_grad(&stack, &p, &x, &[1], 1e-5).unwrap();
        for name in ["000.weight", "000.bias"] {
            assert!(fd.get(name).unwrap().data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn epsilon_outside_range_is_rejected() {
        let stack = [LayerSpec::dense(1, 2)];
        let p = init_params(&stack, &[1], &mut rng::stream(1, "x", &[])).unwrap();
        let x = Tensor::new(vec![1.0], vec![1, 1]).unwrap();
        assert!(finite_diff_grad(&stack, &p, &x, &[0], 1e-2).is_err());
        assert!(finite_diff_grad(&stack, &p, &x, &[0], 1e-9).is_err());
    }

    #[test]
    fn cases_stay_small() {
        for c in default_cases() {
            assert!(crate::nn::layer::stack_param_count(&c.stack) <= 64, "{}", c.layer);
        }
    }

    #[test]
    fn reference_backward_passes_every_layer() {
        for seed in 0..4 {
            let report = run_suite(seed, reference_backward).unwrap();
            for c in &report.cases {
                assert!(c.passed(), "seed {seed} {}: {}", c.layer, c.max_rel_error());
            }
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let report = run_suite(0, sign_flipped_dense_backward).unwrap();
        assert!(!report.passed());
    }
}
