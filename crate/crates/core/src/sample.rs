//! Reverse diffusion with a kernel-aware data-consistency gradient.
//!
//! Each step evaluates the denoiser at `x_t`, decodes the predicted kernel
//! code, forms `x̃₀(x_t)` and the residual `‖y − (k_t ⊗ x̃₀)↓s‖²`, and
//! subtracts `λ·∇_{x_t}` of that residual, obtained by backpropagating
//! through `x̃₀` and the whole network, from the ordinary DDPM update.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::degrade::fidelity;
use crate::error::{Error, Result};
use crate::harness::parallel_map;
use crate::kernels::{BlurKernel, KernelPCA};
use crate::mcformer::Denoiser;
use crate::metrics::{code_l1, psnr};
use crate::rng::RngHandle;
use crate::schedule::{predict_x0_var, reverse_step, DiffusionSchedule};
use crate::tensor::{PaddingMode, Tape, Tensor};

/// How the squared residual is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// `Σ r²`
    Sum,
    /// `Σ r² / numel(y)`; makes `λ` independent of the image size.
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub lambda: f64,
    pub seed: u64,
    pub trace_every: usize,
    /// The last step never injects noise; kept for the record and always true.
    #[serde(default = "yes")]
    pub deterministic_final: bool,
    #[serde(default)]
    pub reduction: Reduction,
    /// Store `x̃₀` in the trace at every recorded step.
    #[serde(default)]
    pub record_x0: bool,
}

fn yes() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            seed: 0,
            trace_every: 1,
            deterministic_final: true,
            reduction: Reduction::default(),
            record_x0: false,
        }
    }
}

impl SamplerConfig {
    pub fn with_lambda(lambda: f64, seed: u64) -> Self {
        Self {
            lambda,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace_every must be at least 1".into()));
        }
        if !self.deterministic_final {
            return Err(Error::Config("the final step is always noise-free".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub t: usize,
    pub residual: f64,
    pub code: Vec<f64>,
    pub x0_hat: Option<Tensor>,
}

/// Recorded steps, in strictly decreasing `t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplerTrace {
    pub entries: Vec<TraceEntry>,
}

impl SamplerTrace {
    /// `t,residual` plus `kernel_l1` (code space) when a reference code is given.
    pub fn to_csv(&self, gt_code: Option<&[f64]>) -> Result<String> {
        let mut out = String::from(if gt_code.is_some() { "t,residual,kernel_l1\n" } else { "t,residual\n" });
        for e in &self.entries {
            match gt_code {
                Some(gt) => writeln!(out, "{},{:?},{:?}", e.t, e.residual, code_l1(&e.code, gt)?),
                None => writeln!(out, "{},{:?}", e.t, e.residual),
            }
            .expect("writing to a string");
        }
        Ok(out)
    }
}

/// Everything computed by one guided step.
#[derive(Clone, Debug)]
pub struct GuidedStep {
    pub x_prev: Tensor,
    /// Plain reverse step, before the guidance correction.
    pub unguided: Tensor,
    /// `∇_{x_t}` of the residual; `None` when `λ == 0`.
    pub grad: Option<Tensor>,
    pub kernel: BlurKernel,
    pub code: Vec<f64>,
    pub residual: f64,
    pub x0_hat: Tensor,
}

fn batched(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        3 => Ok(x.unsqueeze0()),
        4 if x.shape()[0] == 1 => Ok(x.clone()),
        _ => Err(Error::shape(format!("expected one [c,h,w] image, got {:?}", x.shape()))),
    }
}

/// One step from `x_t` to `x_{t−1}`. `noise` is the injected Gaussian
/// sample and must be zero at `t == 1`.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    y: &Tensor,
    s: usize,
    pca: &KernelPCA,
    lambda: f64,
    reduction: Reduction,
    noise: &Tensor,
) -> Result<GuidedStep> {
    let xb = batched(x_t)?;
    let yb = batched(y)?;
    let guided = lambda > 0.0;
    let tape = Tape::new();
    let x = tape.leaf(xb.clone(), guided);
    let out = model.evaluate(&tape, x, &[t], &yb, s)?;
    let code = out.kernel_code.value().data().to_vec();
    let kernel = pca.decode(&code)?;
    let x0 = predict_x0_var(sched, x, t, out.eps_hat)?;
    let mut residual = fidelity(&yb, &kernel, x0, s, PaddingMode::Replicate)?;
    if reduction == Reduction::Mean {
        residual = residual.scale(1.0 / yb.numel() as f64)?;
    }
    let residual_value = residual.value().item()?;

    let eps_hat = out.eps_hat.value();
    let noise = batched(noise)?;
    let unguided = reverse_step(sched, &xb, t, &eps_hat, &noise)?;
    let (x_prev, grad) = if guided {
        let g = tape
            .backward(residual)
            .map_err(|e| Error::NonFinite(format!("guidance gradient at t={t} (residual {residual_value:e}): {e}")))?
            .take(x)
            .ok_or_else(|| Error::invalid("guidance gradient did not reach x_t"))?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "guidance gradient at t={t} (residual {residual_value:e})"
            )));
        }
        (unguided.zip_map(&g, |u, gi| u - lambda * gi)?, Some(g))
    } else {
        (unguided.clone(), None)
    };
    let shape = x_t.shape();
    Ok(GuidedStep {
        x_prev: x_prev.reshape(shape)?,
        unguided: unguided.reshape(shape)?,
        grad: grad.map(|g| g.reshape(shape)).transpose()?,
        kernel,
        code,
        residual: residual_value,
        x0_hat: (*x0.value()).reshape(shape)?,
    })
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x0: Tensor,
    pub kernel: BlurKernel,
    pub code: Vec<f64>,
    pub trace: SamplerTrace,
}

/// Full reverse chain from `x_T ~ N(0, I)` for an observation `y [c,h,w]`;
/// the result is `[c, h·s, w·s]`.
pub fn sample(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    y: &Tensor,
    s: usize,
    pca: &KernelPCA,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if y.rank() != 3 || s == 0 {
        return Err(Error::shape(format!("observation must be [c,h,w], got {:?}", y.shape())));
    }
    let shape = [y.shape()[0], y.shape()[1] * s, y.shape()[2] * s];
    let root = RngHandle::new(cfg.seed);
    let mut x = Tensor::randn(&shape, &mut root.split("x_T"));
    let noise_stream = root.split("noise");
    let big_t = sched.steps();
    let mut trace = SamplerTrace::default();
    let mut last = None;
    for t in (1..=big_t).rev() {
        let noise = if t > 1 {
            Tensor::randn(&shape, &mut noise_stream.split_index(t as u64))
        } else {
            Tensor::zeros(&shape)
        };
        let step = guided_reverse_step(model, sched, &x, t, y, s, pca, cfg.lambda, cfg.reduction, &noise)?;
        if (big_t - t) % cfg.trace_every == 0 || t == 1 {
            trace.entries.push(TraceEntry {
                t,
                residual: step.residual,
                code: step.code.clone(),
                x0_hat: cfg.record_x0.then(|| step.x0_hat.clone()),
            });
        }
        x = step.x_prev;
        last = Some((step.kernel, step.code));
    }
    let (kernel, code) = last.ok_or_else(|| Error::invalid("schedule has no steps"))?;
    Ok(SampleOutput { x0: x, kernel, code, trace })
}

/// One degraded observation with its ground truth.
#[derive(Clone, Debug)]
pub struct SweepInstance {
    pub y: Tensor,
    pub x_gt: Tensor,
    pub scale: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    /// Final-step residual, averaged over instances.
    pub mean_residual: f64,
    pub mean_psnr: f64,
    /// Runs that produced non-finite values. Each counts as residual `+∞`
    /// and PSNR `−∞` in the means.
    pub diverged: usize,
}

/// Restores every instance at every `λ` and averages residual and PSNR.
/// A run that blows up is recorded as diverged rather than aborting the sweep.
pub fn lambda_sweep(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    pca: &KernelPCA,
    dataset: &[SweepInstance],
    lambdas: &[f64],
    base: &SamplerConfig,
) -> Result<Vec<SweepRow>> {
    if dataset.is_empty() {
        return Err(Error::invalid("lambda sweep needs at least one instance"));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let results = parallel_map(dataset, |_, inst| {
                let cfg = SamplerConfig {
                    lambda,
                    seed: inst.seed,
                    trace_every: sched.steps(),
                    ..base.clone()
                };
                let out = match sample(model, sched, &inst.y, inst.scale, pca, &cfg) {
                    Ok(out) if out.x0.is_finite() => out,
                    Ok(_) | Err(Error::NonFinite(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let residual = out.trace.entries.last().map_or(f64::NAN, |e| e.residual);
                Ok(Some((residual, psnr(&out.x0, &inst.x_gt, 1.0)?)))
            })?;
            let n = results.len() as f64;
            let diverged = results.iter().filter(|r| r.is_none()).count();
            let ok = || results.iter().flatten();
            let (mean_residual, mean_psnr) = if diverged > 0 {
                (f64::INFINITY, f64::NEG_INFINITY)
            } else {
                (ok().map(|r| r.0).sum::<f64>() / n, ok().map(|r| r.1).sum::<f64>() / n)
            };
            Ok(SweepRow {
                lambda,
                mean_residual,
                mean_psnr,
                diverged,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,mean_residual,mean_psnr,diverged\n");
    for r in rows {
        writeln!(out, "{:?},{:?},{:?},{}", r.lambda, r.mean_residual, r.mean_psnr, r.diverged)
            .expect("writing to a string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{blur_decimate, fidelity_value};
    use crate::kernels::{fit_pca, make_isotropic, pca_training_corpus, ISO_KERNEL_SIZE};
    use crate::mcformer::{oracle_denoiser, MCFormer, MCFormerConfig};
    use crate::schedule::predict_x0;

    struct Fixture {
        pca: KernelPCA,
        sched: DiffusionSchedule,
        x: Tensor,
        y: Tensor,
        code: Vec<f64>,
    }

    fn fixture(seed: u64) -> Fixture {
        let pca = fit_pca(&pca_training_corpus(300, ISO_KERNEL_SIZE, 3).unwrap(), 10).unwrap();
        let k = make_isotropic(ISO_KERNEL_SIZE, 1.3).unwrap();
        let x = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut RngHandle::new(seed));
        let y = blur_decimate(&x, &k, 2, PaddingMode::Replicate).unwrap();
        let code = pca.encode(&k).unwrap();
        Fixture {
            pca,
            sched: DiffusionSchedule::toy(),
            x,
            y,
            code,
        }
    }

    fn toy_model(seed: u64) -> MCFormer {
        MCFormer::new(MCFormerConfig::toy(), &mut RngHandle::new(seed)).unwrap()
    }

    #[test]
    fn zero_lambda_is_the_plain_reverse_step() {
        let f = fixture(1);
        let m = toy_model(2);
        let x_t = Tensor::randn(&[3, 16, 16], &mut RngHandle::new(3));
        let noise = Tensor::randn(&[3, 16, 16], &mut RngHandle::new(4));
        let st = guided_reverse_step(&m, &f.sched, &x_t, 20, &f.y, 2, &f.pca, 0.0, Reduction::Mean, &noise).unwrap();
        assert!(st.grad.is_none());
        let (eps, _) = m.predict(&x_t.unsqueeze0(), &[20], &f.y, 2).unwrap();
        let plain = reverse_step(&f.sched, &x_t.unsqueeze0(), 20, &eps, &noise.unsqueeze0()).unwrap();
        assert_eq!(st.x_prev.data(), plain.data());
        assert_eq!(st.x_prev, st.unguided);
    }

    #[test]
    fn update_is_minus_lambda_times_gradient() {
        let f = fixture(5);
        let m = toy_model(6);
        let x_t = Tensor::randn(&[3, 16, 16], &mut RngHandle::new(7));
        let noise = Tensor::zeros(&[3, 16, 16]);
        for (lambda, red) in [(0.3, Reduction::Mean), (0.01, Reduction::Sum)] {
            let st = guided_reverse_step(&m, &f.sched, &x_t, 10, &f.y, 2, &f.pca, lambda, red, &noise).unwrap();
            let g = st.grad.unwrap();
            let d = st.x_prev.sub(&st.unguided).unwrap();
            let dot: f64 = d.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gg: f64 = g.data().iter().map(|v| v * v).sum();
            assert!((dot + lambda * gg).abs() <= 1e-10 * (1.0 + lambda * gg), "{dot} vs {}", -lambda * gg);
        }
    }

    #[test]
    fn mean_reduction_divides_by_observation_size() {
        let f = fixture(8);
        let m = toy_model(9);
        let x_t = Tensor::randn(&[3, 16, 16], &mut RngHandle::new(10));
        let noise = Tensor::zeros(&[3, 16, 16]);
        let a = guided_reverse_step(&m, &f.sched, &x_t, 5, &f.y, 2, &f.pca, 1.0, Reduction::Sum, &noise).unwrap();
        let b = guided_reverse_step(&m, &f.sched, &x_t, 5, &f.y, 2, &f.pca, 1.0, Reduction::Mean, &noise).unwrap();
        let n = f.y.numel() as f64;
        assert!((a.residual / n - b.residual).abs() <= 1e-12 * a.residual);
        let (ga, gb) = (a.grad.unwrap(), b.grad.unwrap());
        for (u, v) in ga.data().iter().zip(gb.data()) {
            assert!((u / n - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn oracle_gradient_vanishes_and_recovers_the_image() {
        let f = fixture(11);
        let o = oracle_denoiser(f.x.clone(), f.code.clone(), f.sched.clone());
        let x_t = Tensor::randn(&[3, 16, 16], &mut RngHandle::new(12));
        let st = guided_reverse_step(&o, &f.sched, &x_t, 30, &f.y, 2, &f.pca, 1.0, Reduction::Mean, &Tensor::zeros(&[3, 16, 16]))
            .unwrap();
        assert!(st.grad.unwrap().max_abs() < 1e-10);
        let out = sample(&o, &f.sched, &f.y, 2, &f.pca, &SamplerConfig::with_lambda(1.0, 3)).unwrap();
        assert!(psnr(&out.x0, &f.x, 1.0).unwrap() > 35.0);
    }

    #[test]
    fn small_lambda_lowers_the_next_residual() {
        let m = toy_model(13);
        let t = 8;
        let (mut guided, mut plain) = (0.0, 0.0);
        for seed in 0..10 {
            let f = fixture(100 + seed);
            let x0 = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut RngHandle::new(200 + seed));
            let x_t = crate::schedule::q_sample(&f.sched, &x0, t, &Tensor::randn(&[3, 16, 16], &mut RngHandle::new(300 + seed)))
                .unwrap();
            let noise = Tensor::randn(&[3, 16, 16], &mut RngHandle::new(400 + seed));
            let st = guided_reverse_step(&m, &f.sched, &x_t, t, &f.y, 2, &f.pca, 1e-2, Reduction::Mean, &noise).unwrap();
            let next = |x: &Tensor| {
                let (eps, code) = m.predict(&x.unsqueeze0(), &[t - 1], &f.y, 2).unwrap();
                let k = f.pca.decode(code.data()).unwrap();
                let x0_hat = predict_x0(&f.sched, &x.unsqueeze0(), t - 1, &eps).unwrap();
                fidelity_value(&f.y, &k, &x0_hat, 2).unwrap()
            };
            guided += next(&st.x_prev);
            plain += next(&st.unguided);
        }
        assert!(guided < plain, "guided {guided} vs plain {plain}");
    }

    #[test]
    fn sampling_is_deterministic_and_traced() {
        let f = fixture(14);
        let m = toy_model(15);
        let cfg = SamplerConfig {
            lambda: 0.01,
            seed: 21,
            trace_every: 7,
            ..SamplerConfig::default()
        };
        let a = sample(&m, &f.sched, &f.y, 2, &f.pca, &cfg).unwrap();
        let b = sample(&m, &f.sched, &f.y, 2, &f.pca, &cfg).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.x0.shape(), &[3, 16, 16]);
        let ts: Vec<usize> = a.trace.entries.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![50, 43, 36, 29, 22, 15, 8, 1]);
        let csv = a.trace.to_csv(Some(&f.code)).unwrap();
        assert!(csv.starts_with("t,residual,kernel_l1\n50,"));
        assert_eq!(csv.lines().count(), 9);
        let other = sample(&m, &f.sched, &f.y, 2, &f.pca, &SamplerConfig { seed: 22, ..cfg }).unwrap();
        assert_ne!(a.x0, other.x0);
    }

    #[test]
    fn oracle_trace_settles_in_the_last_quarter() {
        let f = fixture(16);
        let o = oracle_denoiser(f.x.clone(), f.code.clone(), f.sched.clone());
        let out = sample(&o, &f.sched, &f.y, 2, &f.pca, &SamplerConfig::with_lambda(1.0, 4)).unwrap();
        let tail: Vec<f64> = out.trace.entries.iter().filter(|e| e.t <= 13).map(|e| e.residual).collect();
        assert_eq!(tail.len(), 13);
        for w in tail.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(SamplerConfig::with_lambda(-1.0, 0).validate().is_err());
        assert!(SamplerConfig::with_lambda(f64::NAN, 0).validate().is_err());
        let c = SamplerConfig {
            trace_every: 0,
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SamplerConfig {
            deterministic_final: false,
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(SamplerConfig::default().lambda, 1.0);
        assert_eq!(SamplerConfig::default().reduction, Reduction::Mean);
    }

    #[test]
    fn sweep_rows_and_csv() {
        let f = fixture(17);
        let o = oracle_denoiser(f.x.clone(), f.code.clone(), f.sched.clone());
        let inst = SweepInstance {
            y: f.y.clone(),
            x_gt: f.x.clone(),
            scale: 2,
            seed: 1,
        };
        let rows = lambda_sweep(&o, &f.sched, &f.pca, &[inst.clone()], &[1.0], &SamplerConfig::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].diverged, 0);
        assert!(rows[0].mean_psnr > 35.0);
        assert!(lambda_sweep(&o, &f.sched, &f.pca, &[], &[1.0], &SamplerConfig::default()).is_err());
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().next(), Some("lambda,mean_residual,mean_psnr,diverged"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn diverged_runs_are_recorded() {
        let f = fixture(18);
        let m = toy_model(19);
        let inst = SweepInstance {
            y: f.y.clone(),
            x_gt: f.x.clone(),
            scale: 2,
            seed: 1,
        };
        let rows = lambda_sweep(&m, &f.sched, &f.pca, &[inst], &[1e12], &SamplerConfig::default()).unwrap();
        assert_eq!(rows[0].diverged, 1);
        assert_eq!(rows[0].mean_psnr, f64::NEG_INFINITY);
    }
}
