//! DDPM variance schedule and the forward/reverse constants built from it.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const TOY_STEPS: usize = 50;

/// Linear β schedule. Arrays are indexed by `t - 1` for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_var = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(DiffusionSchedule {
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

impl DiffusionSchedule {
    /// T=1000 over [1e-4, 0.02].
    pub fn default_linear() -> Self {
        linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default")
    }

    /// Short schedule whose endpoints are the defaults scaled by `1000 / T`,
    /// so the total noise budget roughly matches the long schedule.
    pub fn rescaled(steps: usize) -> Result<Self> {
        let f = DEFAULT_STEPS as f64 / steps as f64;
        linear_schedule(steps, DEFAULT_BETA_START * f, DEFAULT_BETA_END * f)
    }

    /// The T=50 schedule used for toy experiments.
    pub fn toy() -> Self {
        Self::rescaled(TOY_STEPS).expect("valid toy schedule")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    /// ᾱ_{t}, with ᾱ₀ = 1.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `[T, beta_start, beta_end]`, enough to rebuild the schedule.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![3], vec![self.steps() as f64, self.beta_start, self.beta_end])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            [steps, lo, hi] if steps.fract() == 0.0 && *steps >= 1.0 => linear_schedule(*steps as usize, *lo, *hi),
            _ => Err(Error::Format("bad schedule tensor".into())),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `√ᾱ_t·x₀ + √(1−ᾱ_t)·ε`
pub fn q_sample(sched: &DiffusionSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    same_shape(x0, eps, "q_sample")?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`
pub fn predict_x0(sched: &DiffusionSchedule, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    same_shape(x_t, eps_hat, "predict_x0")?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Differentiable form of [`predict_x0`].
pub fn predict_x0_var<'t>(sched: &DiffusionSchedule, x_t: Var<'t>, t: usize, eps_hat: Var<'t>) -> Result<Var<'t>> {
    let ab = sched.alpha_bar(t)?;
    x_t.sub(eps_hat.scale((1.0 - ab).sqrt())?)?.scale(1.0 / ab.sqrt())
}

/// Posterior mean `(1/√α_t)(x_t − β_t/√(1−ᾱ_t)·ε̂)` plus `√σ²_t·noise`.
/// The noise must be identically zero at `t == 1`.
pub fn reverse_step(
    sched: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    noise: &Tensor,
) -> Result<Tensor> {
    let i = sched.idx(t)?;
    same_shape(x_t, eps_hat, "reverse_step")?;
    same_shape(x_t, noise, "reverse_step noise")?;
    if t == 1 && noise.data().iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("noise must be zero at the final step"));
    }
    let coef = sched.beta[i] / (1.0 - sched.alpha_bar[i]).sqrt();
    let inv = 1.0 / sched.alpha[i].sqrt();
    let sd = sched.posterior_var[i].sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| inv * (x - coef * e))?;
    mean.zip_map(noise, |m, z| m + sd * z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = linear_schedule(1, 0.01, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.01]);
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 0.01);
        assert_eq!(s.posterior_var(1).unwrap(), 0.0);
    }

    #[test]
    fn range_errors() {
        assert!(linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.03, 0.02).is_err());
        assert!(linear_schedule(10, 0.01, 1.0).is_err());
        let s = DiffusionSchedule::toy();
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(51).is_err());
    }

    #[test]
    fn toy_schedule_endpoints() {
        let s = DiffusionSchedule::toy();
        assert_eq!(s.steps(), 50);
        assert!((s.beta(1).unwrap() - 0.002).abs() < 1e-15);
        assert!((s.beta(50).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn tensor_round_trip() {
        let s = DiffusionSchedule::toy();
        assert_eq!(DiffusionSchedule::from_tensor(&s.to_tensor()).unwrap(), s);
    }

    #[test]
    fn final_step_rejects_noise() {
        let s = DiffusionSchedule::toy();
        let x = Tensor::ones(&[2]);
        assert!(reverse_step(&s, &x, 1, &x, &x).is_err());
        assert!(reverse_step(&s, &x, 1, &x, &Tensor::zeros(&[2])).is_ok());
    }
}
