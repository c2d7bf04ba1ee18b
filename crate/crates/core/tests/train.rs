use std::fs;

use bdiff::data::ImageCorpus;
use bdiff::kernels::{fit_pca, pca_training_corpus, KernelPCA, ISO_KERNEL_SIZE};
use bdiff::mcformer::{MCFormer, MCFormerConfig, ModelBundle};
use bdiff::schedule::DiffusionSchedule;
use bdiff::train::{
    load_training_state, loss_and_grads, read_metrics, synthesize_batch, train_loop, train_step, AdamState,
    TrainConfig,
};
use bdiff::RngHandle;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn pca() -> KernelPCA {
    fit_pca(&pca_training_corpus(400, ISO_KERNEL_SIZE, 1).unwrap(), 10).unwrap()
}

fn small_cfg(dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::toy(dir);
    cfg.hr_patch = 16;
    cfg.io.synthetic_images = 6;
    cfg.io.synthetic_size = 32;
    cfg
}

/// Least-squares slope of `ys` on `0..n` and its one-sided p-value for slope < 0.
fn slope_and_p(ys: &[(f64, f64)]) -> (f64, f64) {
    let n = ys.len() as f64;
    let mx = ys.iter().map(|p| p.0).sum::<f64>() / n;
    let my = ys.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = ys.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = ys.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = ys.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0).unwrap();
    (slope, t.cdf(slope / se))
}

#[test]
fn single_item_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.batch_size = 1;
    let corpus = ImageCorpus::synthetic(1, 32, 3);
    let pca = pca();
    let batch = synthesize_batch(&cfg, &corpus, &pca, &mut RngHandle::new(4)).unwrap();
    let sched = DiffusionSchedule::toy();
    let mut model = MCFormer::new(cfg.model.clone(), &mut RngHandle::new(5)).unwrap();
    let mut opt = AdamState::new(model.params(), &cfg.optimizer);
    // same timestep and noise every step
    let step_rng = RngHandle::new(6);
    let first = loss_and_grads(&model, &batch, &sched, &mut step_rng.clone()).unwrap().0.loss;
    for _ in 0..500 {
        train_step(&mut model, &mut opt, &batch, &sched, 1e-3, &mut step_rng.clone()).unwrap();
    }
    let last = loss_and_grads(&model, &batch, &sched, &mut step_rng.clone()).unwrap().0.loss;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn both_loss_terms_trend_down_over_the_first_steps() {
    let corpus = ImageCorpus::synthetic(6, 32, 0);
    let pca = pca();
    let (mut eps_pts, mut code_pts) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.seed = seed;
        cfg.total_iters = 200;
        cfg.io.checkpoint_every = 0;
        let sched = DiffusionSchedule::toy();
        let mut model = MCFormer::new(cfg.model.clone(), &mut RngHandle::new(seed).split("init")).unwrap();
        let mut opt = AdamState::new(model.params(), &cfg.optimizer);
        let stream = RngHandle::new(seed).split("train");
        for iter in 0..cfg.total_iters {
            let mut rng = stream.split_index(iter as u64);
            let batch = synthesize_batch(&cfg, &corpus, &pca, &mut rng.split("batch")).unwrap();
            let s = train_step(&mut model, &mut opt, &batch, &sched, cfg.optimizer.lr_at(iter), &mut rng).unwrap();
            eps_pts.push((iter as f64, s.eps_mse));
            code_pts.push((iter as f64, s.kernel_l1));
        }
    }
    for (name, pts) in [("eps_mse", &eps_pts), ("kernel_l1", &code_pts)] {
        let (slope, p) = slope_and_p(pts);
        assert!(slope < 0.0 && p < 0.01, "{name}: slope {slope:e}, p {p:e}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = ImageCorpus::synthetic(4, 32, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut full = small_cfg(a.path());
    full.total_iters = 6;
    full.io.checkpoint_every = 3;
    train_loop(&full, &corpus).unwrap();

    let mut part = small_cfg(b.path());
    part.total_iters = 3;
    part.io.checkpoint_every = 3;
    train_loop(&part, &corpus).unwrap();
    part.total_iters = 6;
    part.io.resume = true;
    train_loop(&part, &corpus).unwrap();

    let ckpt_a = fs::read(a.path().join("checkpoint.bdtn")).unwrap();
    let ckpt_b = fs::read(b.path().join("checkpoint.bdtn")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(
        fs::read_to_string(a.path().join("metrics.csv")).unwrap(),
        fs::read_to_string(b.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn learning_rate_halving_shows_in_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.batch_size = 1;
    cfg.total_iters = 7;
    cfg.optimizer.lr_halving_interval = 3;
    let out = train_loop(&cfg, &ImageCorpus::synthetic(2, 32, 2)).unwrap();
    let text = fs::read_to_string(&out.metrics).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iter,loss,eps_mse,kernel_l1,lr");
    let lrs: Vec<f64> = read_metrics(&out.metrics).unwrap().iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 2.5e-4]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.total_iters = 2;
    let out = train_loop(&cfg, &ImageCorpus::synthetic(2, 32, 2)).unwrap();
    let (bundle, opt, iter) = load_training_state(&out.checkpoint).unwrap();
    assert_eq!(iter, 2);
    assert_eq!(bundle.model.params().tensors(), out.bundle.model.params().tensors());
    assert_eq!(bundle.pca, out.bundle.pca);
    assert_eq!(opt, out.opt);

    let path = dir.path().join("bundle.bdtn");
    out.bundle.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back.model.params().tensors(), out.bundle.model.params().tensors());
    assert_eq!(back.schedule, out.bundle.schedule);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.batch_size = 2;
    cfg.hr_patch = 8;
    let pca = pca();
    let batch = synthesize_batch(&cfg, &ImageCorpus::synthetic(2, 16, 7), &pca, &mut RngHandle::new(8)).unwrap();
    let sched = DiffusionSchedule::toy();
    let mut model = MCFormer::new(MCFormerConfig::toy(), &mut RngHandle::new(9)).unwrap();
    let rng = RngHandle::new(10);
    let (_, grads) = loss_and_grads(&model, &batch, &sched, &mut rng.clone()).unwrap();

    let h = 1e-5;
    let mut pick = RngHandle::new(11);
    let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
    for _ in 0..40 {
        let pi = pick.int_inclusive(0, model.params().len() - 1);
        let j = pick.int_inclusive(0, model.params().tensors()[pi].numel() - 1);
        let orig = model.params().tensors()[pi].data()[j];
        let mut at = |v: f64| {
            model.params_mut().tensors_mut()[pi].data_mut()[j] = v;
            loss_and_grads(&model, &batch, &sched, &mut rng.clone()).unwrap().0.loss
        };
        let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
        at(orig);
        let analytic = grads[pi].as_ref().map_or(0.0, |g| g.data()[j]);
        diff = diff.max((numeric - analytic).abs());
        scale = scale.max(numeric.abs()).max(analytic.abs());
    }
    assert!(diff / scale < 1e-3, "rel err {:e}", diff / scale);
}
