//! Joint training of the noise predictor and the kernel-code estimator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{crop, ImageCorpus};
use crate::degrade::{apply, DegradationSpec};
use crate::error::{Error, Result};
use crate::kernels::{fit_pca, pca_training_corpus, KernelFamily, KernelPCA, ISO_KERNEL_SIZE};
use crate::mcformer::{find, DenoiserOutput, MCFormer, MCFormerConfig, ModelBundle, ParamStore};
use crate::rng::RngHandle;
use crate::schedule::{linear_schedule, DiffusionSchedule};
use crate::tensor::{checkpoint, Tape, Tensor, Var};

/// Number of kernels drawn when a PCA basis has to be fitted on the fly.
pub const PCA_FIT_COUNT: usize = 10_000;

pub const METRICS_HEADER: &str = "iter,loss,eps_mse,kernel_l1,lr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Iso,
    Aniso,
    Delta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    pub family: FamilyName,
    /// Family defaults apply when a range field is left out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_amp: Option<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl DegradationConfig {
    pub fn iso() -> Self {
        Self {
            family: FamilyName::Iso,
            kernel_size: None,
            sigma_min: None,
            sigma_max: None,
            noise_amp: None,
            noise_sigma: 0.0,
        }
    }

    pub fn kernel_family(&self) -> KernelFamily {
        match self.family {
            FamilyName::Iso => {
                let KernelFamily::Isotropic { size, sigma_min, sigma_max } = KernelFamily::isotropic_default() else {
                    unreachable!()
                };
                KernelFamily::Isotropic {
                    size: self.kernel_size.unwrap_or(size),
                    sigma_min: self.sigma_min.unwrap_or(sigma_min),
                    sigma_max: self.sigma_max.unwrap_or(sigma_max),
                }
            }
            FamilyName::Aniso => {
                let KernelFamily::Anisotropic {
                    size,
                    sigma_min,
                    sigma_max,
                    noise_amp,
                } = KernelFamily::anisotropic_default()
                else {
                    unreachable!()
                };
                KernelFamily::Anisotropic {
                    size: self.kernel_size.unwrap_or(size),
                    sigma_min: self.sigma_min.unwrap_or(sigma_min),
                    sigma_max: self.sigma_max.unwrap_or(sigma_max),
                    noise_amp: self.noise_amp.unwrap_or(noise_amp),
                }
            }
            FamilyName::Delta => KernelFamily::Delta {
                size: self.kernel_size.unwrap_or(ISO_KERNEL_SIZE),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl From<&DiffusionSchedule> for ScheduleConfig {
    fn from(s: &DiffusionSchedule) -> Self {
        Self {
            steps: s.steps(),
            beta_start: s.beta_start(),
            beta_end: s.beta_end(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Iterations between learning-rate halvings; 0 disables halving.
    pub lr_halving_interval: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// `lr · 2^(−⌊iter / interval⌋)` for a zero-based iteration index.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.lr_halving_interval == 0 {
            self.lr
        } else {
            self.lr * 0.5f64.powi((iter / self.lr_halving_interval) as i32)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Directory of PNG training images; procedural images when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_synthetic_images")]
    pub synthetic_images: usize,
    #[serde(default = "default_synthetic_size")]
    pub synthetic_size: usize,
    /// Pre-fitted BDP1 basis; fitted from the default kernel families when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PathBuf>,
    /// 0 means only the initial and final checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub resume: bool,
}

fn default_synthetic_images() -> usize {
    64
}

fn default_synthetic_size() -> usize {
    64
}

fn default_log_every() -> usize {
    1
}

/// Training configuration; the TOML form has `model`, `schedule`,
/// `degradation`, `optimizer` and `io` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub hr_patch: usize,
    pub total_iters: usize,
    pub scale: usize,
    /// Random horizontal flips. Ignored in deterministic mode.
    #[serde(default)]
    pub hflip: bool,
    pub model: MCFormerConfig,
    pub schedule: ScheduleConfig,
    pub degradation: DegradationConfig,
    pub optimizer: OptimizerConfig,
    pub io: IoConfig,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            hr_patch: 32,
            total_iters: 2000,
            scale: 2,
            hflip: false,
            model: MCFormerConfig::toy(),
            schedule: (&DiffusionSchedule::toy()).into(),
            degradation: DegradationConfig::iso(),
            optimizer: OptimizerConfig {
                lr: 1e-3,
                lr_halving_interval: 1000,
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_eps(),
            },
            io: IoConfig {
                out_dir: out_dir.into(),
                corpus: None,
                synthetic_images: default_synthetic_images(),
                synthetic_size: default_synthetic_size(),
                pca: None,
                checkpoint_every: 500,
                log_every: 1,
                resume: false,
            },
        }
    }

    /// Full protocol: batch 8, 256² patches, 500K iterations, Adam at 2e-4
    /// halved every 100K.
    pub fn full_protocol(out_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self::toy(out_dir);
        cfg.batch_size = 8;
        cfg.hr_patch = 256;
        cfg.total_iters = 500_000;
        cfg.scale = 4;
        cfg.model = MCFormerConfig::full();
        cfg.schedule = (&DiffusionSchedule::default_linear()).into();
        cfg.optimizer.lr = 2e-4;
        cfg.optimizer.lr_halving_interval = 100_000;
        cfg.io.checkpoint_every = 10_000;
        cfg.io.log_every = 100;
        cfg.io.synthetic_size = 512;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.hr_patch == 0 || self.scale == 0 {
            return bad("batch_size, hr_patch and scale must be positive".into());
        }
        if self.hr_patch % self.scale != 0 {
            return bad(format!("hr_patch {} is not divisible by scale {}", self.hr_patch, self.scale));
        }
        let m = self.model.spatial_multiple();
        if self.hr_patch % m != 0 {
            return bad(format!("hr_patch {} is not a multiple of {m}", self.hr_patch));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.optimizer.lr));
        }
        if self.io.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.degradation.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        self.model.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Training images named by the `io` section.
    pub fn corpus(&self) -> Result<ImageCorpus> {
        match &self.io.corpus {
            Some(dir) => ImageCorpus::from_dir(dir),
            None => Ok(ImageCorpus::synthetic(
                self.io.synthetic_images,
                self.io.synthetic_size,
                RngHandle::new(self.seed).split("corpus").seed(),
            )),
        }
    }

    /// Loads the configured basis or fits one of the model's code dimension.
    pub fn pca(&self) -> Result<KernelPCA> {
        let pca = match &self.io.pca {
            Some(path) => KernelPCA::load(path)?,
            None => default_pca(self.model.kernel_code_dim)?,
        };
        if pca.dim() != self.model.kernel_code_dim {
            return Err(Error::Config(format!(
                "PCA dimension {} does not match kernel_code_dim {}",
                pca.dim(),
                self.model.kernel_code_dim
            )));
        }
        Ok(pca)
    }
}

/// Basis fitted on [`PCA_FIT_COUNT`] kernels of the default families.
pub fn default_pca(dim: usize) -> Result<KernelPCA> {
    fit_pca(&pca_training_corpus(PCA_FIT_COUNT, ISO_KERNEL_SIZE, 0)?, dim)
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, cfg: &OptimizerConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One bias-corrected update. `grads[i] == None` counts as a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, m), v), g) in params
            .tensors_mut()
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads)
        {
            if m.shape() != p.shape() || g.as_ref().is_some_and(|g| g.shape() != p.shape()) {
                return Err(Error::shape(format!("moment or gradient shape differs from parameter {:?}", p.shape())));
            }
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.data_mut();
            match g {
                Some(g) => {
                    for (((pi, mi), vi), gi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
                None => {
                    for ((pi, mi), vi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()) {
                        *mi *= b1;
                        *vi *= b2;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            "adam.state".to_string(),
            Tensor::from_parts(vec![4], vec![self.step as f64, self.beta1, self.beta2, self.eps]),
        )];
        for (name, (m, v)) in names.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    pub fn from_tensors(params: &ParamStore, tensors: &[(String, Tensor)]) -> Result<Self> {
        let state = find(tensors, "adam.state")?.data().to_vec();
        if state.len() != 4 {
            return Err(Error::Format("adam.state must hold 4 values".into()));
        }
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, p) in params.names().iter().zip(params.tensors()) {
            for (kind, dst) in [("m", &mut m), ("v", &mut v)] {
                let t = find(tensors, &format!("adam.{kind}.{name}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Format(format!("adam.{kind}.{name} has shape {:?}", t.shape())));
                }
                dst.push(t.clone());
            }
        }
        Ok(Self {
            m,
            v,
            step: state[0] as u64,
            beta1: state[1],
            beta2: state[2],
            eps: state[3],
        })
    }
}

/// Training triples: `x0 [b,3,p,p]`, `y [b,3,p/s,p/s]`, `codes [b,d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub y: Tensor,
    pub codes: Tensor,
    pub scale: usize,
}

/// Random crops degraded by kernels from the configured family.
pub fn synthesize_batch(cfg: &TrainConfig, corpus: &ImageCorpus, pca: &KernelPCA, rng: &mut RngHandle) -> Result<Batch> {
    let (b, p, s) = (cfg.batch_size, cfg.hr_patch, cfg.scale);
    if corpus.is_empty() {
        return Err(Error::invalid("empty image corpus"));
    }
    if let Some(small) = corpus.images().iter().find(|im| im.shape()[1] < p || im.shape()[2] < p) {
        return Err(Error::invalid(format!(
            "corpus image {}x{} is smaller than the {p}x{p} patch",
            small.shape()[1],
            small.shape()[2]
        )));
    }
    let family = cfg.degradation.kernel_family();
    let flip = cfg.hflip && !deterministic_mode();
    let mut crop_rng = rng.split("crop");
    let mut kernel_rng = rng.split("kernel");
    let mut noise_rng = rng.split("noise");
    let mut x0 = Vec::with_capacity(b * 3 * p * p);
    let mut y = Vec::with_capacity(b * 3 * (p / s) * (p / s));
    let mut codes = Vec::with_capacity(b * pca.dim());
    for _ in 0..b {
        let img = corpus.get(crop_rng.int_inclusive(0, corpus.len() - 1));
        let top = crop_rng.int_inclusive(0, img.shape()[1] - p);
        let left = crop_rng.int_inclusive(0, img.shape()[2] - p);
        let mirrored = flip && crop_rng.bool();
        let patch = crop(img, top, left, p, mirrored)?;
        let k = family.sample(&mut kernel_rng)?;
        let spec = DegradationSpec::new(k.clone(), s, cfg.degradation.noise_sigma)?;
        let lr = apply(&spec, &patch, &mut noise_rng)?;
        codes.extend(pca.encode(&k.pad_to(pca.kernel_size())?)?);
        x0.extend_from_slice(patch.data());
        y.extend_from_slice(lr.data());
    }
    Ok(Batch {
        x0: Tensor::new(&[b, 3, p, p], x0)?,
        y: Tensor::new(&[b, 3, p / s, p / s], y)?,
        codes: Tensor::new(&[b, pca.dim()], codes)?,
        scale: s,
    })
}

/// Loss terms recorded on the tape.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub eps_mse: Var<'t>,
    pub kernel_l1: Var<'t>,
}

/// `mean((ε − ε̂)²) + mean(|k_gt − k̂|)`, with codes compared in PCA space.
pub fn loss<'t>(out: &DenoiserOutput<'t>, eps: &Tensor, code_gt: &Tensor) -> Result<LossTerms<'t>> {
    let tape = out.eps_hat.tape();
    if out.eps_hat.shape() != eps.shape() || out.kernel_code.shape() != code_gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?}/{:?} vs targets {:?}/{:?}",
            out.eps_hat.shape(),
            out.kernel_code.shape(),
            eps.shape(),
            code_gt.shape()
        )));
    }
    let eps_mse = out.eps_hat.sub(tape.constant(eps.clone()))?.square()?.mean()?;
    let kernel_l1 = out.kernel_code.sub(tape.constant(code_gt.clone()))?.abs()?.mean()?;
    Ok(LossTerms {
        total: eps_mse.add(kernel_l1)?,
        eps_mse,
        kernel_l1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub eps_mse: f64,
    pub kernel_l1: f64,
}

/// Per-item `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε`.
pub fn noisy_batch(sched: &DiffusionSchedule, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    let b = x0.shape()[0];
    if t.len() != b || eps.shape() != x0.shape() {
        return Err(Error::shape(format!("{} timesteps, eps {:?} for x0 {:?}", t.len(), eps.shape(), x0.shape())));
    }
    let per = x0.numel() / b;
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &step) in t.iter().enumerate() {
        let ab = sched.alpha_bar(step)?;
        let (a, c) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        out.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(x, e)| a * x + c * e));
    }
    Tensor::new(x0.shape(), out)
}

/// Draws per-item timesteps and noise, evaluates the model, returns the
/// loss terms and the gradient of every parameter (`None` if unreached).
pub fn loss_and_grads(
    model: &MCFormer,
    batch: &Batch,
    sched: &DiffusionSchedule,
    rng: &mut RngHandle,
) -> Result<(StepStats, Vec<Option<Tensor>>)> {
    let b = batch.x0.shape()[0];
    let mut t_rng = rng.split("timestep");
    let t: Vec<usize> = (0..b).map(|_| t_rng.int_inclusive(1, sched.steps())).collect();
    let eps = Tensor::randn(batch.x0.shape(), &mut rng.split("eps"));
    let x_t = noisy_batch(sched, &batch.x0, &t, &eps)?;

    let tape = Tape::with_finite_check(false);
    let p = model.params().bind(&tape, true);
    let x = tape.constant(x_t);
    let out = model.forward(&p, x, &t, &batch.y, batch.scale)?;
    let terms = loss(&out, &eps, &batch.codes)?;
    let stats = StepStats {
        loss: terms.total.value().item()?,
        eps_mse: terms.eps_mse.value().item()?,
        kernel_l1: terms.kernel_l1.value().item()?,
    };
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (eps_mse={}, kernel_l1={}, t={t:?})",
            stats.eps_mse, stats.kernel_l1
        )));
    }
    let mut grads = tape.backward(terms.total)?;
    let grads: Vec<Option<Tensor>> = p.vars().iter().map(|&v| grads.take(v)).collect();
    for (name, g) in model.params().names().iter().zip(&grads) {
        if g.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of '{name}'")));
        }
    }
    Ok((stats, grads))
}

/// One optimizer step on `batch`.
pub fn train_step(
    model: &mut MCFormer,
    opt: &mut AdamState,
    batch: &Batch,
    sched: &DiffusionSchedule,
    lr: f64,
    rng: &mut RngHandle,
) -> Result<StepStats> {
    let (stats, grads) = loss_and_grads(model, batch, sched, rng)?;
    opt.update(model.params_mut(), &grads, lr)?;
    Ok(stats)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub stats: StepStats,
    pub lr: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.iter, self.stats.loss, self.stats.eps_mse, self.stats.kernel_l1, self.lr
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad metrics line '{line}'")))
        };
        if f.len() != 5 {
            return Err(Error::Format(format!("bad metrics line '{line}'")));
        }
        Ok(Self {
            iter: f[0].parse().map_err(|_| Error::Format(format!("bad metrics line '{line}'")))?,
            stats: StepStats {
                loss: num(1)?,
                eps_mse: num(2)?,
                kernel_l1: num(3)?,
            },
            lr: num(4)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::parse)
        .collect()
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub opt: AdamState,
    /// Rows logged during this invocation.
    pub history: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bdtn";
pub const METRICS_FILE: &str = "metrics.csv";

fn save_training_state(path: &Path, cfg: &TrainConfig, bundle: &ModelBundle, opt: &AdamState, iter: usize) -> Result<()> {
    let mut tensors = bundle.to_tensors();
    tensors.extend(opt.to_tensors(bundle.model.params().names()));
    tensors.push(("train.iter".into(), Tensor::scalar(iter as f64)));
    tensors.push(("train.seed".into(), Tensor::from_parts(vec![2], split_u64(cfg.seed).to_vec())));
    let tmp = path.with_extension("tmp");
    checkpoint::save(&tmp, &tensors)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

/// Restores weights, optimizer state and completed iteration count.
pub fn load_training_state(path: &Path) -> Result<(ModelBundle, AdamState, usize)> {
    let tensors = checkpoint::load(path)?;
    let bundle = ModelBundle::from_tensors(&tensors)?;
    let opt = AdamState::from_tensors(bundle.model.params(), &tensors)?;
    let iter = find(&tensors, "train.iter")?.item()? as usize;
    Ok((bundle, opt, iter))
}

/// True when `BD_DETERMINISTIC=1`.
pub fn deterministic_mode() -> bool {
    std::env::var("BD_DETERMINISTIC").is_ok_and(|v| v.trim() == "1")
}

/// Runs (or resumes) training and writes `checkpoint.bdtn` and
/// `metrics.csv` under `io.out_dir`.
pub fn train_loop(cfg: &TrainConfig, corpus: &ImageCorpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = &cfg.io.out_dir;
    fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let metrics = out_dir.join(METRICS_FILE);
    let root = RngHandle::new(cfg.seed);
    let schedule = cfg.schedule.build()?;

    let (mut bundle, mut opt, start) = if cfg.io.resume && ckpt.exists() {
        let (bundle, opt, iter) = load_training_state(&ckpt)?;
        if bundle.model.config() != &cfg.model || bundle.schedule != schedule {
            return Err(Error::Config("checkpoint was trained with a different model or schedule".into()));
        }
        (bundle, opt, iter)
    } else {
        let pca = cfg.pca()?;
        let model = MCFormer::new(cfg.model.clone(), &mut root.split("init"))?;
        let opt = AdamState::new(model.params(), &cfg.optimizer);
        (ModelBundle { model, schedule, pca }, opt, 0)
    };

    let mut kept = if start > 0 && metrics.exists() {
        read_metrics(&metrics)?.into_iter().filter(|r| r.iter <= start).collect()
    } else {
        Vec::new()
    };
    let mut log = fs::File::create(&metrics)?;
    writeln!(log, "{METRICS_HEADER}")?;
    for row in &kept {
        writeln!(log, "{}", row.to_csv())?;
    }
    kept.clear();

    if start == 0 {
        save_training_state(&ckpt, cfg, &bundle, &opt, 0)?;
    }
    let stream = root.split("train");
    let mut history = kept;
    for iter in start..cfg.total_iters {
        let mut it_rng = stream.split_index(iter as u64);
        let batch = synthesize_batch(cfg, corpus, &bundle.pca, &mut it_rng.split("batch"))?;
        let lr = cfg.optimizer.lr_at(iter);
        let stats = train_step(&mut bundle.model, &mut opt, &batch, &bundle.schedule, lr, &mut it_rng)?;
        let done = iter + 1;
        if done % cfg.io.log_every == 0 || done == cfg.total_iters {
            let row = MetricsRow { iter: done, stats, lr };
            writeln!(log, "{}", row.to_csv())?;
            history.push(row);
        }
        if (cfg.io.checkpoint_every > 0 && done % cfg.io.checkpoint_every == 0) || done == cfg.total_iters {
            log.flush()?;
            save_training_state(&ckpt, cfg, &bundle, &opt, done)?;
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        bundle,
        opt,
        history,
        checkpoint: ckpt,
        metrics,
    })
}

/// Mean held-out ε-MSE and kernel-code L1 over `batches` fixed batches.
pub fn evaluate(
    model: &MCFormer,
    sched: &DiffusionSchedule,
    pca: &KernelPCA,
    cfg: &TrainConfig,
    corpus: &ImageCorpus,
    batches: usize,
    seed: u64,
) -> Result<StepStats> {
    let root = RngHandle::new(seed);
    let mut acc = StepStats {
        loss: 0.0,
        eps_mse: 0.0,
        kernel_l1: 0.0,
    };
    for i in 0..batches {
        let rng = root.split_index(i as u64);
        let batch = synthesize_batch(cfg, corpus, pca, &mut rng.split("batch"))?;
        let b = cfg.batch_size;
        let mut t_rng = rng.split("timestep");
        let t: Vec<usize> = (0..b).map(|_| t_rng.int_inclusive(1, sched.steps())).collect();
        let eps = Tensor::randn(batch.x0.shape(), &mut rng.split("eps"));
        let x_t = noisy_batch(sched, &batch.x0, &t, &eps)?;
        let tape = Tape::new();
        let p = model.params().bind(&tape, false);
        let out = model.forward(&p, tape.constant(x_t), &t, &batch.y, batch.scale)?;
        let terms = loss(&out, &eps, &batch.codes)?;
        acc.loss += terms.total.value().item()?;
        acc.eps_mse += terms.eps_mse.value().item()?;
        acc.kernel_l1 += terms.kernel_l1.value().item()?;
    }
    let n = batches.max(1) as f64;
    Ok(StepStats {
        loss: acc.loss / n,
        eps_mse: acc.eps_mse / n,
        kernel_l1: acc.kernel_l1 / n,
    })
}
