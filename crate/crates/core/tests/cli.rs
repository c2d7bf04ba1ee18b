use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bdiff::harness::ExperimentReport;
use bdiff::imageio::{quantize8, read_png};
use bdiff::mcformer::{Denoiser, ModelBundle};
use bdiff::schedule::reverse_step;
use bdiff::{RngHandle, Tensor};

fn bdiff(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdiff"))
        .args(args)
        .current_dir(dir)
        .env("BD_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = bdiff(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Images, a kernel, a manifest and a briefly trained model under `dir`.
fn workspace(dir: &Path) -> PathBuf {
    ok(&["synth-images", "--count", "3", "--size", "32", "--seed", "4", "--out", "imgs"], dir);
    ok(&["make-kernel", "--sigma", "1.4", "--out", "k.bdk"], dir);
    let manifest: String = (0..3).map(|i| format!("imgs/synth_{i:04}.png\tk.bdk\t2\t0.0\n")).collect();
    fs::write(dir.join("manifest.tsv"), manifest).unwrap();
    ok(&["train", "--profile", "toy", "--iters", "3", "--out", "run"], dir);
    dir.join("run/checkpoint.bdtn")
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bdiff(&[], dir.path()).status.code(), Some(2));
    assert_eq!(bdiff(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(bdiff(&["make-kernel", "--out", "k.bdk"], dir.path()).status.code(), Some(2));
    assert_eq!(bdiff(&["make-kernel", "--sigma", "x", "--out", "k"], dir.path()).status.code(), Some(2));

    let missing = bdiff(&["restore", "--model", "nope.bdtn", "--input", "a.png", "--out", "o"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.starts_with("error:") && err.contains("nope.bdtn"), "{err}");
    assert_eq!(bdiff(&["make-kernel", "--sigma=-1", "--out", "k"], dir.path()).status.code(), Some(1));
}

#[test]
fn pipeline_runs_and_restore_without_guidance_is_plain_ddpm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = workspace(d);
    ok(&["degrade", "--manifest", "manifest.tsv", "--out", "lr", "--seed", "1"], d);
    let lr = d.join("lr/0001_synth_0001_lr.png");
    assert_eq!(read_png(&lr).unwrap().shape(), &[3, 16, 16]);
    ok(
        &[
            "restore",
            "--model",
            model.to_str().unwrap(),
            "--input",
            lr.to_str().unwrap(),
            "--out",
            "sr",
            "--lambda",
            "0",
            "--seed",
            "7",
        ],
        d,
    );
    let sr = read_png(d.join("sr/0001_synth_0001_lr_sr.png")).unwrap();
    assert!(d.join("sr/0001_synth_0001_lr_kernel.bdk").exists());
    let trace = fs::read_to_string(d.join("sr/0001_synth_0001_lr_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);

    // ancestral sampling written out step by step
    let bundle = ModelBundle::load(&model).unwrap();
    let y = read_png(&lr).unwrap();
    let root = RngHandle::new(7);
    let mut x = Tensor::randn(&[3, 32, 32], &mut root.split("x_T"));
    for t in (1..=bundle.schedule.steps()).rev() {
        let (eps, _) = bundle.model.predict(&x.unsqueeze0(), &[t], &y.unsqueeze0(), 2).unwrap();
        let noise = if t > 1 {
            Tensor::randn(&[3, 32, 32], &mut root.split("noise").split_index(t as u64))
        } else {
            Tensor::zeros(&[3, 32, 32])
        };
        x = reverse_step(&bundle.schedule, &x, t, &eps.reshape(&[3, 32, 32]).unwrap(), &noise).unwrap();
    }
    assert_eq!(sr, quantize8(&x));
}

#[test]
fn eval_report_aggregates_match_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = workspace(d);
    let out = ok(
        &["eval", "--model", model.to_str().unwrap(), "--manifest", "manifest.tsv", "--report", "rep.csv", "--lambda", "0.01"],
        d,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 images"));
    let text = fs::read_to_string(d.join("rep.csv")).unwrap();
    let report = ExperimentReport::from_csv(&text).unwrap();
    assert_eq!(report.rows.len(), 3);
    let mean_line = text.lines().find(|l| l.starts_with("mean,")).unwrap();
    let stored: Vec<f64> = mean_line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    let n = report.rows.len() as f64;
    let manual = [
        report.rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        report.rows.iter().map(|r| r.kernel_l1).sum::<f64>() / n,
        report.rows.iter().map(|r| r.lr_psnr).sum::<f64>() / n,
    ];
    assert_eq!(stored, manual);

    ok(
        &["eval", "--model", model.to_str().unwrap(), "--manifest", "manifest.tsv", "--report", "rep2.csv", "--lambda", "0.01"],
        d,
    );
    assert_eq!(text, fs::read_to_string(d.join("rep2.csv")).unwrap());

    // a barely trained model blows up under strong guidance
    let blown = bdiff(&["eval", "--model", model.to_str().unwrap(), "--manifest", "manifest.tsv", "--report", "rep3.csv"], d);
    assert_eq!(blown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&blown.stderr).contains("non-finite"));
}

#[test]
fn deterministic_mode_reproduces_every_artifact() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path();
            let model = workspace(d);
            ok(&["degrade", "--manifest", "manifest.tsv", "--out", "lr"], d);
            ok(
                &["restore", "--model", model.to_str().unwrap(), "--input", "lr/0000_synth_0000_lr.png", "--out", "sr", "--lambda", "0.01"],
                d,
            );
            let files = [
                "lr/0000_synth_0000_lr.png",
                "run/checkpoint.bdtn",
                "run/metrics.csv",
                "sr/0000_synth_0000_lr_sr.png",
                "sr/0000_synth_0000_lr_kernel.bdk",
                "sr/0000_synth_0000_lr_trace.csv",
            ];
            files.map(|f| fs::read(d.join(f)).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--seeds", "2", "--coords", "6"], dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).contains("guidance_through_network"));
}

#[test]
fn fit_pca_and_config_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["fit-pca", "--count", "300", "--dim", "6", "--out", "p.bdtn"], d);
    assert_eq!(bdiff::kernels::KernelPCA::load(d.join("p.bdtn")).unwrap().dim(), 6);
    ok(&["train", "--profile", "toy", "--iters", "9", "--seed", "3", "--dump-config", "cfg.toml"], d);
    let cfg = bdiff::train::TrainConfig::load(&d.join("cfg.toml")).unwrap();
    assert_eq!((cfg.total_iters, cfg.seed), (9, 3));
    assert!(!d.join("runs").exists());
}

#[test]
fn lambda_sweep_writes_one_row_per_weight() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = workspace(d);
    ok(
        &["lambda-sweep", "--model", model.to_str().unwrap(), "--manifest", "manifest.tsv", "--lambdas", "0,0.1", "--out", "sw.csv"],
        d,
    );
    let text = fs::read_to_string(d.join("sw.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda,mean_residual,mean_psnr,diverged");
    assert_eq!(lines.len(), 3);
}
