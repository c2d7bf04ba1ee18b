//! Experiment plumbing: thread fan-out, reports, evaluation runs and the
//! gradient-check suite.

pub mod gradcheck;

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::degrade::{apply, blur_decimate, DegradationSpec};
use crate::error::{Error, Result};
use crate::kernels::BlurKernel;
use crate::mcformer::ModelBundle;
use crate::metrics::{kernel_l1, lr_consistency_psnr, psnr};
use crate::rng::RngHandle;
use crate::sample::{sample, SampleOutput, SamplerConfig};
use crate::tensor::{PaddingMode, Tensor};
pub use crate::train::deterministic_mode;

/// Worker threads for fan-out; one in deterministic mode.
pub fn worker_count() -> usize {
    if deterministic_mode() {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// `f(i, item)` for every item, results in input order. Each item is
/// handled by exactly one worker, so per-item determinism carries over.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().enumerate().map(|(i, it)| f(i, it)).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(i, &items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every item visited")).collect()
}

/// SHA-256 over a configuration text and the seeds used, hex encoded.
pub fn fingerprint(config_text: &str, seeds: &[u64]) -> String {
    let mut h = Sha256::new();
    h.update(config_text.as_bytes());
    for s in seeds {
        h.update(s.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub psnr: f64,
    pub kernel_l1: f64,
    pub lr_psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregates {
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_kernel_l1: f64,
    pub mean_lr_psnr: f64,
}

impl Aggregates {
    pub fn from_rows(rows: &[ReportRow]) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            count: rows.len(),
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_kernel_l1: rows.iter().map(|r| r.kernel_l1).sum::<f64>() / n,
            mean_lr_psnr: rows.iter().map(|r| r.lr_psnr).sum::<f64>() / n,
        }
    }
}

/// Per-image rows, their means, and the fingerprint of the run.
/// PSNR is on RGB in `[0,1]` with peak 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub rows: Vec<ReportRow>,
    pub aggregates: Aggregates,
}

const REPORT_HEADER: &str = "id,psnr,kernel_l1,lr_psnr";

impl ExperimentReport {
    pub fn new(fingerprint: String, rows: Vec<ReportRow>) -> Self {
        let aggregates = Aggregates::from_rows(&rows);
        Self {
            fingerprint,
            rows,
            aggregates,
        }
    }

    /// True when the stored means equal a fresh recomputation.
    pub fn is_consistent(&self) -> bool {
        Aggregates::from_rows(&self.rows) == self.aggregates
    }

    pub fn to_csv(&self) -> String {
        let a = &self.aggregates;
        let mut out = format!("# fingerprint={}\n# psnr=rgb,peak=1\n{REPORT_HEADER}\n", self.fingerprint);
        for r in &self.rows {
            writeln!(out, "{},{:?},{:?},{:?}", r.id, r.psnr, r.kernel_l1, r.lr_psnr).expect("string write");
        }
        writeln!(out, "mean,{:?},{:?},{:?}", a.mean_psnr, a.mean_kernel_l1, a.mean_lr_psnr).expect("string write");
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output; the `mean` line must agree
    /// with the rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("report: {m}"));
        let mut fingerprint = None;
        let mut rows = Vec::new();
        let mut stored = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(fp) = line.strip_prefix("# fingerprint=") {
                fingerprint = Some(fp.to_string());
                continue;
            }
            if line.starts_with('#') || line == REPORT_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(&format!("malformed line '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number '{s}'")));
            let (p, k, l) = (num(f[1])?, num(f[2])?, num(f[3])?);
            if f[0] == "mean" {
                stored = Some((p, k, l));
            } else {
                rows.push(ReportRow {
                    id: f[0].to_string(),
                    psnr: p,
                    kernel_l1: k,
                    lr_psnr: l,
                });
            }
        }
        let report = Self::new(fingerprint.ok_or_else(|| bad("missing fingerprint"))?, rows);
        if let Some((p, k, l)) = stored {
            let a = &report.aggregates;
            if (p, k, l) != (a.mean_psnr, a.mean_kernel_l1, a.mean_lr_psnr) {
                return Err(bad("stored means differ from the rows"));
            }
        }
        Ok(report)
    }
}

/// A ground-truth image and kernel to degrade and restore.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub x_hr: Tensor,
    pub kernel: BlurKernel,
    pub scale: usize,
    pub noise_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub row: ReportRow,
    pub output: SampleOutput,
    pub y: Tensor,
}

/// Degrades each item (noise seeded by `seed` and its index), restores it
/// and scores it. Items are processed in parallel unless deterministic
/// mode is on; rows keep input order either way.
pub fn evaluate_items(bundle: &ModelBundle, items: &[EvalItem], cfg: &SamplerConfig) -> Result<Vec<EvalResult>> {
    let noise_root = RngHandle::new(cfg.seed).split("eval-noise");
    parallel_map(items, |i, item| {
        let spec = DegradationSpec::new(item.kernel.clone(), item.scale, item.noise_sigma)?;
        let y = apply(&spec, &item.x_hr, &mut noise_root.split_index(i as u64))?;
        let run = SamplerConfig {
            seed: RngHandle::new(cfg.seed).split_index(i as u64).seed(),
            ..cfg.clone()
        };
        let output = sample(&bundle.model, &bundle.schedule, &y, item.scale, &bundle.pca, &run)?;
        let gt = item.kernel.pad_to(output.kernel.size())?;
        let y_clean = blur_decimate(&item.x_hr, &item.kernel, item.scale, PaddingMode::Replicate)?;
        let row = ReportRow {
            id: item.id.clone(),
            psnr: psnr(&output.x0, &item.x_hr, 1.0)?,
            kernel_l1: kernel_l1(&output.kernel, &gt)?,
            lr_psnr: lr_consistency_psnr(&output.kernel, &item.x_hr, &y_clean, item.scale)?,
        };
        Ok(EvalResult { row, output, y })
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ReportRow> {
        vec![
            ReportRow {
                id: "a".into(),
                psnr: 21.5,
                kernel_l1: 0.001,
                lr_psnr: 40.0,
            },
            ReportRow {
                id: "b".into(),
                psnr: 23.25,
                kernel_l1: 0.003,
                lr_psnr: 100.0,
            },
        ]
    }

    #[test]
    fn report_round_trip_and_aggregates() {
        let r = ExperimentReport::new(fingerprint("cfg", &[1, 2]), rows());
        assert!(r.is_consistent());
        assert_eq!(r.aggregates.mean_psnr, (21.5 + 23.25) / 2.0);
        let back = ExperimentReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        let tampered = r.to_csv().replace("mean,22.375", "mean,22.5");
        assert!(ExperimentReport::from_csv(&tampered).is_err());
    }

    #[test]
    fn fingerprint_depends_on_config_and_seeds() {
        let a = fingerprint("x", &[1]);
        assert_eq!(a.len(), 64);
        assert_eq!(a, fingerprint("x", &[1]));
        assert_ne!(a, fingerprint("x", &[2]));
        assert_ne!(a, fingerprint("y", &[1]));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = parallel_map(&items, |i, v| Ok(i * 100 + v)).unwrap();
        assert_eq!(out, (0..37).map(|i| i * 101).collect::<Vec<_>>());
        let err = parallel_map(&items, |i, _| if i == 5 { Err(Error::invalid("x")) } else { Ok(i) });
        assert!(err.is_err());
    }
}
