//! Central finite-difference checks of reverse-mode gradients.
//!
//! A case maps input tensors to an output; the scalar that gets
//! differentiated is `Σ w ⊙ output` for a fixed random `w`, so every output
//! element contributes. Errors are norm-wise:
//! `max|analytic − numeric| / max(max|analytic|, max|numeric|)` per input.

use crate::degrade::{blur_decimate_var, fidelity};
use crate::error::{Error, Result};
use crate::kernels::{make_anisotropic, make_isotropic, KernelPCA};
use crate::mcformer::{channel_norm, Denoiser, MCFormer, MCFormerConfig};
use crate::rng::RngHandle;
use crate::schedule::{predict_x0_var, DiffusionSchedule};
use crate::tensor::{PaddingMode, Tape, Tensor, Var};

/// Per-op tolerance.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the guidance gradient through the network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

const STEP: f64 = 1e-5;

pub type CaseFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Normal,
    Positive,
    /// `|v| ∈ [0.3, 1.5]`, for ops with a kink at zero.
    AwayFromZero,
}

impl Domain {
    fn sample(self, shape: &[usize], rng: &mut RngHandle) -> Tensor {
        match self {
            Domain::Normal => Tensor::randn(shape, rng),
            Domain::Positive => Tensor::rand_uniform(shape, 0.5, 2.0, rng),
            Domain::AwayFromZero => Tensor::from_fn(shape, |_| {
                let m = rng.uniform(0.3, 1.5);
                if rng.bool() {
                    m
                } else {
                    -m
                }
            }),
        }
    }
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub f: CaseFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Pins a closure to the higher-ranked signature that [`check_gradients`] takes.
pub fn as_case<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

fn weighted_sum<'t>(out: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    out.mul_const(w)?.sum()
}

fn eval_scalar(f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>, inputs: &[Tensor], w: &Tensor) -> Result<f64> {
    let tape = Tape::with_finite_check(false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    weighted_sum(f(&tape, &vars)?, w)?.value().item()
}

/// Compares analytic and central-difference gradients for every input.
/// `coords` limits the number of coordinates probed per input (all when `None`).
pub fn check_gradients(
    f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    inputs: &[Tensor],
    coords: Option<usize>,
    rng: &mut RngHandle,
) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let w = Tensor::randn(&out.shape(), rng);
    let mut grads = tape.backward(weighted_sum(out, &w)?)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].numel();
        let probe: Vec<usize> = match coords {
            Some(k) if k < n => (0..k).map(|_| rng.int_inclusive(0, n - 1)).collect(),
            _ => (0..n).collect(),
        };
        let mut num_max: f64 = 0.0;
        let mut ana_max: f64 = 0.0;
        let mut diff_max: f64 = 0.0;
        for &j in &probe {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval_scalar(f, &plus, &w)? - eval_scalar(f, &minus, &w)?) / (2.0 * STEP);
            let a = analytic.data()[j];
            num_max = num_max.max(numeric.abs());
            ana_max = ana_max.max(a.abs());
            diff_max = diff_max.max((a - numeric).abs());
        }
        let scale = num_max.max(ana_max);
        let rel = if scale == 0.0 { 0.0 } else { diff_max / scale };
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of input {i}")));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], f: CaseFn) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        f,
    }
}

/// One case per differentiable operation (several for ops with modes).
pub fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    vec![
        case("add_broadcast", &[(&[2, 3, 4], Normal), (&[3, 1], Normal)], |_, v| v[0].add(v[1])),
        case("sub_broadcast", &[(&[2, 1, 4], Normal), (&[3, 4], Normal)], |_, v| v[0].sub(v[1])),
        case("mul_broadcast", &[(&[2, 3, 4], Normal), (&[4], Normal)], |_, v| v[0].mul(v[1])),
        case("div", &[(&[3, 4], Normal), (&[3, 4], Positive)], |_, v| v[0].div(v[1])),
        case("div_broadcast", &[(&[2, 3], Normal), (&[2, 1], AwayFromZero)], |_, v| v[0].div(v[1])),
        case("neg", &[(&[5], Normal)], |_, v| v[0].neg()),
        case("exp", &[(&[2, 5], Normal)], |_, v| v[0].exp()),
        case("ln", &[(&[2, 5], Positive)], |_, v| v[0].ln()),
        case("sqrt", &[(&[2, 5], Positive)], |_, v| v[0].sqrt()),
        case("abs", &[(&[2, 5], AwayFromZero)], |_, v| v[0].abs()),
        case("square", &[(&[2, 5], Normal)], |_, v| v[0].square()),
        case("sigmoid", &[(&[2, 5], Normal)], |_, v| v[0].sigmoid()),
        case("gelu", &[(&[2, 5], Normal)], |_, v| v[0].gelu()),
        case("leaky_relu", &[(&[2, 5], AwayFromZero)], |_, v| v[0].leaky_relu(0.2)),
        case("scale", &[(&[4], Normal)], |_, v| v[0].scale(-1.7)),
        case("add_scalar", &[(&[4], Normal)], |_, v| v[0].add_scalar(0.3)),
        case("sum", &[(&[2, 3], Normal)], |_, v| v[0].sum()),
        case("mean", &[(&[2, 3], Normal)], |_, v| v[0].mean()),
        case("sum_axes", &[(&[2, 3, 4], Normal)], |_, v| v[0].sum_axes(&[0, 2], false)),
        case("mean_axes_keepdim", &[(&[2, 3, 4], Normal)], |_, v| v[0].mean_axes(&[1], true)),
        case("reshape", &[(&[2, 6], Normal)], |_, v| v[0].reshape(&[3, 4])?.square()),
        case("permute", &[(&[2, 3, 4], Normal)], |_, v| v[0].permute(&[2, 0, 1])?.square()),
        case("slice", &[(&[2, 5, 3], Normal)], |_, v| v[0].slice(1, 1, 3)?.square()),
        case("chunk", &[(&[2, 6], Normal)], |_, v| {
            let c = v[0].chunk(3, 1)?;
            c[0].mul(c[2])?.add(c[1])
        }),
        case("concat", &[(&[2, 2], Normal), (&[2, 3], Normal)], |_, v| {
            Var::concat(&[v[0], v[1]], 1)?.square()
        }),
        case("matmul", &[(&[3, 4], Normal), (&[4, 2], Normal)], |_, v| v[0].matmul(v[1])),
        case("matmul_batched_broadcast", &[(&[2, 1, 3, 4], Normal), (&[3, 4, 2], Normal)], |_, v| {
            v[0].matmul(v[1])
        }),
        case("transpose_last", &[(&[2, 3, 4], Normal)], |_, v| v[0].transpose_last()?.square()),
        case("pad2d_zero", &[(&[1, 2, 4, 5], Normal)], |_, v| {
            v[0].pad2d([1, 2, 0, 3], PaddingMode::Zero)?.square()
        }),
        case("pad2d_replicate", &[(&[1, 2, 4, 5], Normal)], |_, v| {
            v[0].pad2d([2, 1, 3, 0], PaddingMode::Replicate)?.square()
        }),
        case("pad2d_circular", &[(&[1, 2, 4, 5], Normal)], |_, v| {
            v[0].pad2d([1, 1, 2, 2], PaddingMode::Circular)?.square()
        }),
        case("conv2d", &[(&[2, 3, 5, 5], Normal), (&[4, 3, 3, 3], Normal)], |_, v| {
            v[0].conv2d(v[1], 1, 1, PaddingMode::Zero, 1)
        }),
        case("conv2d_stride2_replicate", &[(&[1, 2, 6, 6], Normal), (&[3, 2, 3, 3], Normal)], |_, v| {
            v[0].conv2d(v[1], 2, 1, PaddingMode::Replicate, 1)
        }),
        case("conv2d_grouped", &[(&[1, 4, 5, 5], Normal), (&[6, 2, 3, 3], Normal)], |_, v| {
            v[0].conv2d(v[1], 1, 1, PaddingMode::Zero, 2)
        }),
        case("conv2d_depthwise", &[(&[2, 3, 6, 6], Normal), (&[3, 1, 5, 5], Normal)], |_, v| {
            v[0].conv2d(v[1], 1, 2, PaddingMode::Circular, 3)
        }),
        case("conv2d_1x1", &[(&[1, 3, 4, 4], Normal), (&[2, 3, 1, 1], Normal)], |_, v| {
            v[0].conv2d(v[1], 1, 0, PaddingMode::Zero, 1)
        }),
        case("conv_transpose2d", &[(&[1, 3, 3, 3], Normal), (&[3, 2, 3, 3], Normal)], |_, v| {
            v[0].conv_transpose2d(v[1], 2, 1, 1, (6, 6))
        }),
        case("decimate", &[(&[1, 2, 6, 4], Normal)], |_, v| v[0].decimate(2)?.square()),
        case("softmax_last", &[(&[2, 3, 5], Normal)], |_, v| v[0].softmax_last()),
        case("mul_const", &[(&[2, 3], Normal)], |_, v| {
            v[0].mul_const(&Tensor::from_fn(&[3], |i| i as f64 - 0.5))
        }),
        case("add_const", &[(&[2, 3], Normal)], |_, v| {
            v[0].add_const(&Tensor::from_fn(&[2, 1], |i| i as f64))?.square()
        }),
        case("channel_norm", &[(&[2, 4, 3, 3], Normal)], |_, v| channel_norm(v[0])),
        case("blur_decimate", &[(&[1, 3, 8, 8], Normal)], |_, v| {
            let k = make_anisotropic(5, 0.9, 1.6, 0.4, 0.0, &mut RngHandle::new(0))?;
            blur_decimate_var(v[0], &k, 2, PaddingMode::Replicate)
        }),
        case("fidelity", &[(&[1, 3, 8, 8], Normal)], |_, v| {
            let k = make_isotropic(5, 1.1)?;
            let y = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.37).sin());
            fidelity(&y, &k, v[0], 2, PaddingMode::Replicate)
        }),
    ]
}

/// Checks every op case for `seeds` independent input draws.
pub fn run_op_checks(seeds: usize) -> Result<Vec<CheckResult>> {
    op_cases()
        .iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = RngHandle::new(seed as u64).split(c.name);
                let inputs: Vec<Tensor> = c.inputs.iter().map(|(s, d)| d.sample(s, &mut rng)).collect();
                worst = worst.max(check_gradients(&c.f, &inputs, None, &mut rng)?);
            }
            Ok(CheckResult {
                name: c.name.to_string(),
                max_rel_err: worst,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// `∇_{x_t} ‖y − (k ⊗ x̃₀(x_t))↓s‖²` through the toy network, with the
/// kernel decoded once at the unperturbed point and then held fixed.
/// Probes `coords` random coordinates of `x_t` per seed.
pub fn run_network_check(seeds: usize, coords: usize, pca: &KernelPCA) -> Result<CheckResult> {
    let sched = DiffusionSchedule::toy();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let root = RngHandle::new(seed as u64).split("network");
        let model = MCFormer::new(MCFormerConfig::toy(), &mut root.split("init"))?;
        let mut rng = root.split("data");
        let y = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let x_t = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        let t = rng.int_inclusive(1, sched.steps());
        let (_, code) = model.predict(&x_t, &[t], &y, 2)?;
        let k = pca.decode(code.data())?;
        let f = as_case(|tape, v| {
            let out = model.evaluate(tape, v[0], &[t], &y, 2)?;
            let x0 = predict_x0_var(&sched, v[0], t, out.eps_hat)?;
            fidelity(&y, &k, x0, 2, PaddingMode::Replicate)
        });
        worst = worst.max(check_gradients(&f, &[x_t], Some(coords), &mut rng)?);
    }
    Ok(CheckResult {
        name: "guidance_through_network".into(),
        max_rel_err: worst,
        tolerance: NETWORK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // The detached factor hides half of d(x²)/dx from the tape.
        let f = as_case(|_, v| {
            let detached = (*v[0].value()).clone();
            v[0].mul_const(&detached)
        });
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = check_gradients(&f, &[x], None, &mut RngHandle::new(0)).unwrap();
        assert!((err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn every_case_passes_one_seed() {
        for r in run_op_checks(1).unwrap() {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err);
        }
    }
}
