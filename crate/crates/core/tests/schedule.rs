use bdiff::schedule::{linear_schedule, predict_x0, q_sample, reverse_step, DiffusionSchedule};
use bdiff::{RngHandle, Tensor};
use proptest::prelude::*;

fn direct_alpha_bar(steps: usize, b0: f64, b1: f64, t: usize) -> f64 {
    (1..=t)
        .map(|i| {
            let beta = if steps == 1 { b0 } else { b0 + (b1 - b0) * (i - 1) as f64 / (steps - 1) as f64 };
            1.0 - beta
        })
        .product()
}

#[test]
fn default_schedule_constants() {
    let s = DiffusionSchedule::default_linear();
    assert_eq!(s.steps(), 1000);
    let want = direct_alpha_bar(1000, 1e-4, 0.02, 1000);
    assert!((s.alpha_bar(1000).unwrap() / want - 1.0).abs() < 1e-9);
    assert!((want / 4.04e-5 - 1.0).abs() < 0.01);
    assert_eq!(s.posterior_var(1).unwrap(), 0.0);
    let betas = s.betas();
    assert!(betas.windows(2).all(|w| w[0] < w[1]));
    assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
    assert!(betas.iter().all(|&b| b > 0.0 && b < 1.0));
    for t in 2..=1000 {
        let want = (1.0 - s.alpha_bar(t - 1).unwrap()) / (1.0 - s.alpha_bar(t).unwrap()) * s.beta(t).unwrap();
        assert!((s.posterior_var(t).unwrap() - want).abs() <= 1e-15 * want.max(1.0));
    }
}

#[test]
fn toy_schedule_rescales_the_default_endpoints() {
    let s = DiffusionSchedule::toy();
    assert_eq!(s.steps(), 50);
    assert!((s.beta_start() - 1e-4 * 20.0).abs() < 1e-15);
    assert!((s.beta_end() - 0.02 * 20.0).abs() < 1e-15);
    let want = direct_alpha_bar(50, 0.002, 0.4, 50);
    assert!((s.alpha_bar(50).unwrap() / want - 1.0).abs() < 1e-12);
}

#[test]
fn q_sample_examples() {
    let s = linear_schedule(100, 1e-6, 0.02).unwrap();
    let mut rng = RngHandle::new(0);
    let x0 = Tensor::rand_uniform(&[2, 4, 4], 0.0, 1.0, &mut rng);
    let eps = Tensor::randn(&[2, 4, 4], &mut rng);
    assert!(q_sample(&s, &x0, 1, &eps).unwrap().max_abs_diff(&x0).unwrap() < 1e-2);
    let scaled = q_sample(&s, &x0, 60, &Tensor::zeros(&[2, 4, 4])).unwrap();
    let ab = s.alpha_bar(60).unwrap().sqrt();
    assert_eq!(scaled, x0.map(|v| ab * v));
    assert!(q_sample(&s, &x0, 0, &eps).is_err());
    assert!(q_sample(&s, &x0, 101, &eps).is_err());
}

#[test]
fn forward_marginal_matches_by_monte_carlo() {
    let s = DiffusionSchedule::toy();
    let x0 = Tensor::new(&[1], vec![0.7]).unwrap();
    let draws = 10_000;
    for t in [1, 25, 50] {
        let mut rng = RngHandle::new(t as u64);
        let samples: Vec<f64> = (0..draws)
            .map(|_| q_sample(&s, &x0, t, &Tensor::randn(&[1], &mut rng)).unwrap().data()[0])
            .collect();
        let n = draws as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar(t).unwrap();
        let (mu, sigma2) = (ab.sqrt() * 0.7, 1.0 - ab);
        assert!((mean - mu).abs() < 3.0 * (sigma2 / n).sqrt(), "t={t} mean {mean} vs {mu}");
        assert!((var - sigma2).abs() < 3.0 * sigma2 * (2.0 / (n - 1.0)).sqrt(), "t={t} var {var} vs {sigma2}");
    }
}

#[test]
fn predict_x0_examples() {
    let s = DiffusionSchedule::toy();
    let mut rng = RngHandle::new(5);
    let x0 = Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
    let ab = s.alpha_bar(17).unwrap().sqrt();
    let back = predict_x0(&s, &x0.map(|v| ab * v), 17, &Tensor::zeros(&[3, 4, 4])).unwrap();
    assert!(back.max_abs_diff(&x0).unwrap() < 1e-12);
}

#[test]
fn final_step_is_noise_free_and_small_beta_barely_moves() {
    let s = linear_schedule(10, 1e-8, 1e-7).unwrap();
    let mut rng = RngHandle::new(2);
    let x0 = Tensor::rand_uniform(&[4], 0.0, 1.0, &mut rng);
    let eps = Tensor::randn(&[4], &mut rng);
    let x_t = q_sample(&s, &x0, 5, &eps).unwrap();
    let prev = reverse_step(&s, &x_t, 5, &eps, &Tensor::zeros(&[4])).unwrap();
    assert!(prev.max_abs_diff(&x_t).unwrap() < 1e-3);
    assert!(reverse_step(&s, &x_t, 1, &eps, &Tensor::ones(&[4])).is_err());
}

#[test]
fn deterministic_oracle_chain_reaches_the_image() {
    let s = DiffusionSchedule::toy();
    let mut rng = RngHandle::new(9);
    let x0 = Tensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
    let mut x = Tensor::randn(&[1, 8, 8], &mut rng);
    let zero = Tensor::zeros(&[1, 8, 8]);
    let mut errors = Vec::new();
    for t in (1..=s.steps()).rev() {
        let ab = s.alpha_bar(t).unwrap();
        let eps = x.zip_map(&x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).unwrap();
        x = reverse_step(&s, &x, t, &eps, &zero).unwrap();
        errors.push(x.sub(&x0).unwrap().map(|v| v * v).mean());
    }
    assert!(*errors.last().unwrap() < 1e-3);
    // contraction toward x0 once the chain is past the first step
    assert!(errors.windows(2).skip(1).all(|w| w[1] <= w[0] + 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_sample_and_predict_x0_invert(seed in any::<u64>(), t in 1usize..=50) {
        let s = DiffusionSchedule::toy();
        let mut rng = RngHandle::new(seed);
        let x0 = Tensor::rand_uniform(&[3, 5, 5], 0.0, 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 5, 5], &mut rng);
        let x_t = q_sample(&s, &x0, t, &eps).unwrap();
        prop_assert!(predict_x0(&s, &x_t, t, &eps).unwrap().max_abs_diff(&x0).unwrap() < 1e-10);
    }

    #[test]
    fn single_step_schedules(b in 1e-5f64..0.5) {
        let s = linear_schedule(1, b, b).unwrap();
        prop_assert_eq!(s.betas(), &[b]);
        prop_assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - b);
    }
}
