use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bdiff::degrade::{apply, load_manifest, DegradationSpec, ManifestEntry};
use bdiff::harness::gradcheck::{run_network_check, run_op_checks};
use bdiff::harness::{evaluate_items, fingerprint, parallel_map, write_text, EvalItem, ExperimentReport};
use bdiff::imageio::{read_png, write_png};
use bdiff::kernels::{fit_pca, make_anisotropic, make_isotropic, pca_training_corpus, BlurKernel, KernelPCA};
use bdiff::mcformer::ModelBundle;
use bdiff::sample::{lambda_sweep, sample, sweep_csv, Reduction, SamplerConfig, SweepInstance};
use bdiff::train::{default_pca, train_loop, TrainConfig};
use bdiff::{Error, Result, RngHandle};

#[derive(Parser)]
#[command(name = "bdiff", version, about = "Blind super-resolution with a kernel-guided diffusion sampler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade the HR images of a manifest into LR images.
    Degrade {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a Gaussian blur kernel in BDK1 format.
    MakeKernel {
        #[arg(long, value_enum, default_value_t = KernelKindArg::Iso)]
        kind: KernelKindArg,
        #[arg(long, default_value_t = 21)]
        size: usize,
        #[arg(long)]
        sigma: f64,
        /// Second axis width (anisotropic only; defaults to `sigma`).
        #[arg(long)]
        sigma_y: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_amp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write procedural PNG images, e.g. as a training or test corpus.
    SynthImages {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a kernel PCA basis on kernels from the default families.
    FitPca {
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 21)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a TOML config or a named profile.
    Train {
        #[arg(long, conflicts_with = "profile")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        /// Overrides `io.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `total_iters`.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
        /// Write the resolved config here and exit.
        #[arg(long)]
        dump_config: Option<PathBuf>,
    },
    /// Restore LR images: SR image, kernel and sampler trace per input.
    Restore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        scale: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Degrade, restore and score every manifest entry; writes a report CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Mean residual and PSNR for several guidance weights.
    LambdaSweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 1.0, 5.0, 10.0])]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
        reduction: ReductionArg,
    },
    /// Finite-difference checks of every differentiable op and of the
    /// guidance gradient through the toy network.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Coordinates of x_t probed per seed in the network check.
        #[arg(long, default_value_t = 12)]
        coords: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelKindArg {
    Iso,
    Aniso,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Toy,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Sum,
    Mean,
}

impl From<ReductionArg> for Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Sum => Reduction::Sum,
            ReductionArg::Mean => Reduction::Mean,
        }
    }
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    reduction: ReductionArg,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            lambda: self.lambda,
            seed: self.seed,
            trace_every: self.trace_every,
            reduction: self.reduction.into(),
            ..SamplerConfig::default()
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn degrade(manifest: &Path, out: &Path, seed: u64) -> Result<()> {
    let entries = load_manifest(manifest)?;
    std::fs::create_dir_all(out)?;
    let root = RngHandle::new(seed).split("degrade");
    parallel_map(&entries, |i, e| {
        let x = read_png(&e.hr_path)?;
        let k = BlurKernel::load(&e.kernel_path)?;
        let spec = DegradationSpec::new(k.clone(), e.scale, e.noise_sigma)?;
        let y = apply(&spec, &x, &mut root.split_index(i as u64))?;
        let name = format!("{i:04}_{}", stem(&e.hr_path));
        write_png(out.join(format!("{name}_lr.png")), &y)?;
        k.save(out.join(format!("{name}_kernel.bdk")))
    })?;
    println!("degraded {} images into {}", entries.len(), out.display());
    Ok(())
}

fn load_items(manifest: &Path) -> Result<(Vec<ManifestEntry>, Vec<EvalItem>)> {
    let entries = load_manifest(manifest)?;
    let items = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(EvalItem {
                id: format!("{i:04}_{}", stem(&e.hr_path)),
                x_hr: read_png(&e.hr_path)?,
                kernel: BlurKernel::load(&e.kernel_path)?,
                scale: e.scale,
                noise_sigma: e.noise_sigma,
            })
        })
        .collect::<Result<_>>()?;
    Ok((entries, items))
}

fn manifest_text(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\t{:?}\n", e.hr_path.display(), e.kernel_path.display(), e.scale, e.noise_sigma))
        .collect()
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Degrade { manifest, out, seed } => degrade(&manifest, &out, seed),
        Command::MakeKernel {
            kind,
            size,
            sigma,
            sigma_y,
            theta,
            noise_amp,
            seed,
            out,
        } => {
            let k = match kind {
                KernelKindArg::Iso => make_isotropic(size, sigma)?,
                KernelKindArg::Aniso => make_anisotropic(
                    size,
                    sigma,
                    sigma_y.unwrap_or(sigma),
                    theta,
                    noise_amp,
                    &mut RngHandle::new(seed).split("kernel"),
                )?,
            };
            k.save(&out)
        }
        Command::SynthImages { count, size, seed, out } => {
            std::fs::create_dir_all(&out)?;
            let corpus = bdiff::data::ImageCorpus::synthetic(count, size, seed);
            for (i, img) in corpus.images().iter().enumerate() {
                write_png(out.join(format!("synth_{i:04}.png")), img)?;
            }
            Ok(())
        }
        Command::FitPca {
            count,
            dim,
            size,
            seed,
            out,
        } => {
            let kernels = pca_training_corpus(count, size, seed)?;
            let pca: KernelPCA = fit_pca(&kernels, dim)?;
            pca.save(&out)?;
            println!("fitted d={dim} on {count} kernels; tail bound {:e}", pca.mse_threshold());
            Ok(())
        }
        Command::Train {
            config,
            profile,
            out,
            iters,
            seed,
            resume,
            dump_config,
        } => {
            let mut cfg = match (config, profile) {
                (Some(path), _) => TrainConfig::load(&path)?,
                (None, Some(ProfileArg::Full)) => TrainConfig::full_protocol("runs/full"),
                (None, _) => TrainConfig::toy("runs/toy"),
            };
            if let Some(out) = out {
                cfg.io.out_dir = out;
            }
            if let Some(n) = iters {
                cfg.total_iters = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.io.resume |= resume;
            cfg.validate()?;
            if let Some(path) = dump_config {
                return write_text(&path, &cfg.to_toml());
            }
            let outcome = train_loop(&cfg, &cfg.corpus()?)?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "iter {} loss {:.6} eps_mse {:.6} kernel_l1 {:.6}",
                    last.iter, last.stats.loss, last.stats.eps_mse, last.stats.kernel_l1
                );
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            Ok(())
        }
        Command::Restore {
            model,
            input,
            out,
            scale,
            sampler,
        } => {
            let bundle = load_model(&model)?;
            std::fs::create_dir_all(&out)?;
            let cfg = sampler.config();
            parallel_map(&input, |_, path| {
                let y = read_png(path)?;
                let res = sample(&bundle.model, &bundle.schedule, &y, scale, &bundle.pca, &cfg)?;
                let name = stem(path);
                write_png(out.join(format!("{name}_sr.png")), &res.x0)?;
                res.kernel.save(out.join(format!("{name}_kernel.bdk")))?;
                write_text(&out.join(format!("{name}_trace.csv")), &res.trace.to_csv(None)?)
            })?;
            Ok(())
        }
        Command::Eval {
            model,
            manifest,
            report,
            sampler,
        } => {
            let bundle = load_model(&model)?;
            let (entries, items) = load_items(&manifest)?;
            let cfg = sampler.config();
            let results = evaluate_items(&bundle, &items, &cfg)?;
            let config_text = format!(
                "{}\n{}\n{}",
                bundle.model.config().to_toml(),
                toml::to_string(&cfg).expect("sampler config serializes"),
                manifest_text(&entries)
            );
            let rep = ExperimentReport::new(
                fingerprint(&config_text, &[cfg.seed]),
                results.into_iter().map(|r| r.row).collect(),
            );
            write_text(&report, &rep.to_csv())?;
            println!(
                "{} images: mean PSNR {:.3} dB, kernel L1 {:.3e}, LR PSNR {:.3} dB",
                rep.aggregates.count, rep.aggregates.mean_psnr, rep.aggregates.mean_kernel_l1, rep.aggregates.mean_lr_psnr
            );
            Ok(())
        }
        Command::LambdaSweep {
            model,
            manifest,
            lambdas,
            out,
            seed,
            reduction,
        } => {
            let bundle = load_model(&model)?;
            let (_, items) = load_items(&manifest)?;
            let root = RngHandle::new(seed);
            let dataset = items
                .iter()
                .enumerate()
                .map(|(i, it)| {
                    let spec = DegradationSpec::new(it.kernel.clone(), it.scale, it.noise_sigma)?;
                    Ok(SweepInstance {
                        y: apply(&spec, &it.x_hr, &mut root.split("noise").split_index(i as u64))?,
                        x_gt: it.x_hr.clone(),
                        scale: it.scale,
                        seed: root.split_index(i as u64).seed(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let base = SamplerConfig {
                reduction: reduction.into(),
                ..SamplerConfig::default()
            };
            let rows = lambda_sweep(&bundle.model, &bundle.schedule, &bundle.pca, &dataset, &lambdas, &base)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write_text(&out, &csv)
        }
        Command::Gradcheck { seeds, coords } => {
            let mut results = run_op_checks(seeds)?;
            results.push(run_network_check(seeds, coords, &default_pca(10)?)?);
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<28} {:>10.3e} < {:.0e}  {verdict}", r.name, r.max_rel_err, r.tolerance);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(bdiff::Error::Check(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
