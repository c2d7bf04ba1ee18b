//! Kernel-modulated conditional transformer denoiser.
//!
//! The network sees `concat(x_t, bicubic↑s(y))`, estimates a kernel code from
//! it, fuses the code embedding with a timestep embedding, and modulates
//! every transformer block of a U-shaped encoder-decoder with the result.

pub mod layers;
pub mod params;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::resize_to;
use crate::error::{Error, Result};
use crate::kernels::KernelPCA;
use crate::rng::RngHandle;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{checkpoint, Tape, Tensor, Var};

use layers::{Block, Conv, KernelEstimator, Mlp, Upsample};
pub use layers::{channel_norm, modulate1, modulate2, timestep_features, Gdfn, Mdta};
pub use params::{Binding, Init, ParamId, ParamStore};

/// Network predictions for a batch.
pub struct DenoiserOutput<'t> {
    /// `[b,c,h,w]`, same shape as `x_t`.
    pub eps_hat: Var<'t>,
    /// `[b,d]`.
    pub kernel_code: Var<'t>,
}

/// Anything that predicts `(ε̂, kernel code)` from `(x_t, t, y)`.
pub trait Denoiser: Send + Sync {
    fn code_dim(&self) -> usize;

    /// `x_t` is `[b,c,H,W]`, `t` holds one timestep per sample and `y_lr`
    /// is `[b,c,H/s,W/s]` (or `[c,H/s,W/s]` when `b == 1`).
    fn evaluate<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        t: &[usize],
        y_lr: &Tensor,
        s: usize,
    ) -> Result<DenoiserOutput<'t>>;

    /// Tape-free evaluation returning plain tensors.
    fn predict(&self, x_t: &Tensor, t: &[usize], y_lr: &Tensor, s: usize) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let out = self.evaluate(&tape, x, t, y_lr, s)?;
        Ok(((*out.eps_hat.value()).clone(), (*out.kernel_code.value()).clone()))
    }
}

fn default_estimator_channels() -> usize {
    16
}

fn default_image_channels() -> usize {
    3
}

fn default_expansion() -> f64 {
    2.66
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MCFormerConfig {
    pub levels: usize,
    pub blocks_per_level: Vec<usize>,
    pub channels_per_level: Vec<usize>,
    pub heads_per_level: Vec<usize>,
    pub refinement_blocks: usize,
    pub kernel_code_dim: usize,
    pub time_embed_dim: usize,
    /// Width of the kernel estimator's conv stack.
    #[serde(default = "default_estimator_channels")]
    pub estimator_channels: usize,
    #[serde(default = "default_image_channels")]
    pub image_channels: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: f64,
    /// Start the estimator's linear head at zero.
    #[serde(default)]
    pub zero_init_estimator_head: bool,
}

impl MCFormerConfig {
    /// Small profile used for tests and desk-scale training.
    pub fn toy() -> Self {
        Self {
            levels: 2,
            blocks_per_level: vec![1, 1],
            channels_per_level: vec![8, 16],
            heads_per_level: vec![1, 2],
            refinement_blocks: 1,
            kernel_code_dim: 10,
            time_embed_dim: 32,
            estimator_channels: 16,
            image_channels: 3,
            ffn_expansion: 2.66,
            zero_init_estimator_head: false,
        }
    }

    /// Full-size four-level profile.
    pub fn full() -> Self {
        Self {
            levels: 4,
            blocks_per_level: vec![2, 3, 6, 8],
            channels_per_level: vec![48, 96, 192, 384],
            heads_per_level: vec![1, 2, 4, 8],
            refinement_blocks: 2,
            kernel_code_dim: 10,
            time_embed_dim: 192,
            estimator_channels: 64,
            image_channels: 3,
            ffn_expansion: 2.66,
            zero_init_estimator_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        for (name, len) in [
            ("blocks_per_level", self.blocks_per_level.len()),
            ("channels_per_level", self.channels_per_level.len()),
            ("heads_per_level", self.heads_per_level.len()),
        ] {
            if len != self.levels {
                return bad(format!("{name} has {len} entries for {} levels", self.levels));
            }
        }
        for (i, (&c, &h)) in self.channels_per_level.iter().zip(&self.heads_per_level).enumerate() {
            if c == 0 || h == 0 || c % h != 0 {
                return bad(format!("level {i}: {c} channels not divisible into {h} heads"));
            }
        }
        if self.kernel_code_dim == 0 || self.image_channels == 0 || self.estimator_channels == 0 {
            return bad("code dim, image channels and estimator width must be positive".into());
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and at least 2".into());
        }
        if !(self.ffn_expansion.is_finite() && self.ffn_expansion > 0.0) {
            return bad("ffn_expansion must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Number of scalar weights, computed without allocating them.
    pub fn parameter_count(&self) -> Result<usize> {
        let mut store = ParamStore::counting();
        build_layout(self, &mut store, &mut RngHandle::new(0))?;
        Ok(store.scalar_count())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    estimator: KernelEstimator,
    time_mlp: Mlp,
    kernel_mlp: Mlp,
    input: Conv,
    encoders: Vec<Vec<Block>>,
    downs: Vec<Conv>,
    bottleneck: Vec<Block>,
    ups: Vec<Upsample>,
    reduces: Vec<Conv>,
    decoders: Vec<Vec<Block>>,
    refinement: Vec<Block>,
    output: Conv,
}

fn build_layout(cfg: &MCFormerConfig, store: &mut ParamStore, rng: &mut RngHandle) -> Result<Layout> {
    cfg.validate()?;
    let e = cfg.time_embed_dim;
    let ch = &cfg.channels_per_level;
    let in_ch = 2 * cfg.image_channels;
    let last = cfg.levels - 1;
    let blocks = |store: &mut ParamStore, rng: &mut RngHandle, name: &str, n: usize, lvl: usize| {
        (0..n)
            .map(|i| {
                Block::init(
                    store,
                    &format!("{name}.{i}"),
                    ch[lvl],
                    cfg.heads_per_level[lvl],
                    e,
                    cfg.ffn_expansion,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()
    };
    let estimator = KernelEstimator::init(
        store,
        "estimator",
        in_ch,
        cfg.estimator_channels,
        cfg.kernel_code_dim,
        cfg.zero_init_estimator_head,
        rng,
    );
    let time_mlp = Mlp::init(store, "time_mlp", e, e, rng);
    let kernel_mlp = Mlp::init(store, "kernel_mlp", cfg.kernel_code_dim, e, rng);
    let input = Conv::init(store, "input", in_ch, ch[0], 3, 1, 1, rng);
    let mut encoders = Vec::new();
    let mut downs = Vec::new();
    for lvl in 0..last {
        encoders.push(blocks(store, rng, &format!("enc{lvl}"), cfg.blocks_per_level[lvl], lvl)?);
        downs.push(Conv::init(store, &format!("down{lvl}"), ch[lvl], ch[lvl + 1], 3, 2, 1, rng));
    }
    let bottleneck = blocks(store, rng, "bottleneck", cfg.blocks_per_level[last], last)?;
    let mut ups = Vec::new();
    let mut reduces = Vec::new();
    let mut decoders = Vec::new();
    for lvl in 0..last {
        ups.push(Upsample::init(store, &format!("up{lvl}"), ch[lvl + 1], ch[lvl], rng));
        reduces.push(Conv::init(store, &format!("reduce{lvl}"), 2 * ch[lvl], ch[lvl], 1, 1, 1, rng));
        decoders.push(blocks(store, rng, &format!("dec{lvl}"), cfg.blocks_per_level[lvl], lvl)?);
    }
    let refinement = blocks(store, rng, "refine", cfg.refinement_blocks, 0)?;
    let output = Conv::init(store, "output", ch[0], cfg.image_channels, 3, 1, 1, rng);
    Ok(Layout {
        estimator,
        time_mlp,
        kernel_mlp,
        input,
        encoders,
        downs,
        bottleneck,
        ups,
        reduces,
        decoders,
        refinement,
        output,
    })
}

/// Bicubic `↑s` of the observation to the extents of `x_t`, batched.
pub fn upsample_condition(y_lr: &Tensor, s: usize, x_shape: &[usize]) -> Result<Tensor> {
    let y = match y_lr.rank() {
        3 => y_lr.unsqueeze0(),
        4 => y_lr.clone(),
        r => return Err(Error::shape(format!("observation must be rank 3 or 4, got {r}"))),
    };
    let ys = y.shape();
    if x_shape.len() != 4
        || ys[0] != x_shape[0]
        || ys[1] != x_shape[1]
        || ys[2] * s != x_shape[2]
        || ys[3] * s != x_shape[3]
    {
        return Err(Error::shape(format!(
            "observation {:?} upsampled by {s} does not match x_t {:?}",
            y_lr.shape(),
            x_shape
        )));
    }
    resize_to(&y, x_shape[2], x_shape[3])
}

#[derive(Clone, Debug)]
pub struct MCFormer {
    cfg: MCFormerConfig,
    params: ParamStore,
    layout: Layout,
}

impl MCFormer {
    pub fn new(cfg: MCFormerConfig, rng: &mut RngHandle) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = build_layout(&cfg, &mut params, rng)?;
        Ok(Self { cfg, params, layout })
    }

    pub fn config(&self) -> &MCFormerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Estimated kernel code `[b,d]` from the concatenated input.
    pub fn kernel_estimator<'t>(&self, p: &Binding<'t>, input: Var<'t>) -> Result<Var<'t>> {
        self.layout.estimator.forward(p, input)
    }

    /// Forward pass with parameters already bound to the tape.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t>,
        x_t: Var<'t>,
        t: &[usize],
        y_lr: &Tensor,
        s: usize,
    ) -> Result<DenoiserOutput<'t>> {
        let shape = x_t.shape();
        if shape.len() != 4 || shape[1] != self.cfg.image_channels {
            return Err(Error::shape(format!(
                "x_t must be [b,{},h,w], got {shape:?}",
                self.cfg.image_channels
            )));
        }
        let m = self.cfg.spatial_multiple();
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::shape(format!(
                "extents {}x{} are not multiples of {m}",
                shape[2], shape[3]
            )));
        }
        if t.len() != shape[0] {
            return Err(Error::shape(format!("{} timesteps for batch {}", t.len(), shape[0])));
        }
        let tape = x_t.tape();
        let y_up = tape.constant(upsample_condition(y_lr, s, &shape)?);
        let input = Var::concat(&[x_t, y_up], 1)?;
        let l = &self.layout;

        let code = l.estimator.forward(p, input)?;
        let t_feat = tape.constant(timestep_features(t, self.cfg.time_embed_dim));
        let embed = l.time_mlp.forward(p, t_feat)?.add(l.kernel_mlp.forward(p, code)?)?;

        let mut f = l.input.forward(p, input)?;
        let mut skips = Vec::with_capacity(l.downs.len());
        for (blocks, down) in l.encoders.iter().zip(&l.downs) {
            for b in blocks {
                f = b.forward(p, f, embed)?;
            }
            skips.push(f);
            f = down.forward(p, f)?;
        }
        for b in &l.bottleneck {
            f = b.forward(p, f, embed)?;
        }
        for lvl in (0..l.ups.len()).rev() {
            let skip = skips[lvl];
            let ss = skip.shape();
            f = l.ups[lvl].forward(p, f, (ss[2], ss[3]))?;
            f = l.reduces[lvl].forward(p, Var::concat(&[f, skip], 1)?)?;
            for b in &l.decoders[lvl] {
                f = b.forward(p, f, embed)?;
            }
        }
        for b in &l.refinement {
            f = b.forward(p, f, embed)?;
        }
        let eps_hat = l.output.forward(p, f)?;
        Ok(DenoiserOutput {
            eps_hat,
            kernel_code: code,
        })
    }
}

impl Denoiser for MCFormer {
    fn code_dim(&self) -> usize {
        self.cfg.kernel_code_dim
    }

    fn evaluate<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        t: &[usize],
        y_lr: &Tensor,
        s: usize,
    ) -> Result<DenoiserOutput<'t>> {
        let p = self.params.bind(tape, false);
        self.forward(&p, x_t, t, y_lr, s)
    }
}

/// Analytic denoiser that knows the clean image and the true kernel code:
/// `ε̂ = (x_t − √ᾱ_t·x₀)/√(1−ᾱ_t)`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    x0: Tensor,
    code: Vec<f64>,
    schedule: DiffusionSchedule,
}

pub fn oracle_denoiser(x0_true: Tensor, k_true_code: Vec<f64>, schedule: DiffusionSchedule) -> OracleDenoiser {
    OracleDenoiser {
        x0: x0_true,
        code: k_true_code,
        schedule,
    }
}

impl Denoiser for OracleDenoiser {
    fn code_dim(&self) -> usize {
        self.code.len()
    }

    fn evaluate<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        t: &[usize],
        _y_lr: &Tensor,
        _s: usize,
    ) -> Result<DenoiserOutput<'t>> {
        let shape = x_t.shape();
        let x0 = if self.x0.rank() + 1 == shape.len() {
            self.x0.unsqueeze0()
        } else {
            self.x0.clone()
        };
        let b = shape[0];
        if x0.shape()[1..] != shape[1..] || (x0.shape()[0] != b && x0.shape()[0] != 1) || t.len() != b {
            return Err(Error::shape(format!(
                "oracle image {:?} / {} timesteps do not match x_t {shape:?}",
                self.x0.shape(),
                t.len()
            )));
        }
        let per = x0.numel() / x0.shape()[0];
        let mut scaled = Vec::with_capacity(b * per);
        let mut inv = Vec::with_capacity(b);
        for (i, &step) in t.iter().enumerate() {
            let ab = self.schedule.alpha_bar(step)?;
            let src = if x0.shape()[0] == 1 { 0 } else { i };
            scaled.extend(x0.data()[src * per..(src + 1) * per].iter().map(|v| ab.sqrt() * v));
            inv.push(1.0 / (1.0 - ab).sqrt());
        }
        let mean = Tensor::new(&shape, scaled)?;
        let inv = Tensor::new(&[b, 1, 1, 1], inv)?;
        let eps_hat = x_t.sub(tape.constant(mean))?.mul_const(&inv)?;
        let mut codes = Vec::with_capacity(b * self.code.len());
        for _ in 0..b {
            codes.extend_from_slice(&self.code);
        }
        let kernel_code = tape.constant(Tensor::new(&[b, self.code.len()], codes)?);
        Ok(DenoiserOutput { eps_hat, kernel_code })
    }
}

fn text_tensor(text: &str) -> Tensor {
    let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
    Tensor::from_parts(vec![bytes.len()], bytes)
}

fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::Format("embedded text is not utf-8".into()))
}

pub(crate) fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))
}

/// Model weights together with everything needed to sample from them.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: MCFormer,
    pub schedule: DiffusionSchedule,
    pub pca: KernelPCA,
}

impl ModelBundle {
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("config".to_string(), text_tensor(&self.model.cfg.to_toml())),
            ("schedule".to_string(), self.schedule.to_tensor()),
        ];
        out.extend(self.pca.to_tensors("pca"));
        out.extend(self.model.params.to_named("param."));
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let cfg = MCFormerConfig::from_toml(&tensor_text(find(tensors, "config")?)?)?;
        let schedule = DiffusionSchedule::from_tensor(find(tensors, "schedule")?)?;
        let pca = KernelPCA::from_tensors("pca", tensors)?;
        let mut model = MCFormer::new(cfg, &mut RngHandle::new(0))?;
        model.params.load_named("param.", tensors)?;
        if pca.dim() != model.cfg.kernel_code_dim {
            return Err(Error::Format(format!(
                "PCA dimension {} does not match code dimension {}",
                pca.dim(),
                model.cfg.kernel_code_dim
            )));
        }
        Ok(Self { model, schedule, pca })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?)
    }
}
