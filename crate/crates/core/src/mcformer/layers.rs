use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::tensor::{PaddingMode, Tensor, Var};

use super::params::{Binding, Init, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

fn fan_in_std(fan_in: usize) -> f64 {
    (1.0 / fan_in.max(1) as f64).sqrt()
}

/// `y = x·Wᵀ + b` on `[b, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut RngHandle) -> Self {
        Self::init_with(store, name, in_dim, out_dim, Init::Normal(fan_in_std(in_dim)), 0.0, rng)
    }

    pub fn init_with(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: f64,
        rng: &mut RngHandle,
    ) -> Self {
        Self {
            weight: store.add(&format!("{name}.weight"), &[out_dim, in_dim], weight, rng),
            bias: store.add(&format!("{name}.bias"), &[out_dim], Init::Const(bias), rng),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.get(self.weight).transpose_last()?)?.add(p.get(self.bias))
    }
}

/// Zero-padded 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut RngHandle,
    ) -> Self {
        let fan_in = in_ch / groups * kernel * kernel;
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                &[out_ch, in_ch / groups, kernel, kernel],
                Init::Normal(fan_in_std(fan_in)),
                rng,
            ),
            bias: store.add(&format!("{name}.bias"), &[out_ch], Init::Const(0.0), rng),
            out_ch,
            kernel,
            stride,
            groups,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.conv2d(
            p.get(self.weight),
            self.stride,
            self.kernel / 2,
            PaddingMode::Zero,
            self.groups,
        )?;
        y.add(p.get(self.bias).reshape(&[1, self.out_ch, 1, 1])?)
    }
}

/// 3x3 stride-2 transposed convolution doubling the spatial extents.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_ch: usize,
}

impl Upsample {
    pub fn init(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut RngHandle) -> Self {
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                &[in_ch, out_ch, 3, 3],
                Init::Normal(fan_in_std(in_ch * 9 / 4)),
                rng,
            ),
            bias: store.add(&format!("{name}.bias"), &[out_ch], Init::Const(0.0), rng),
            out_ch,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>, out_hw: (usize, usize)) -> Result<Var<'t>> {
        let y = x.conv_transpose2d(p.get(self.weight), 2, 1, 1, out_hw)?;
        y.add(p.get(self.bias).reshape(&[1, self.out_ch, 1, 1])?)
    }
}

/// Normalizes `[b,c,h,w]` over the channel axis without an affine part.
pub fn channel_norm<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let mu = x.mean_axes(&[1], true)?;
    let xc = x.sub(mu)?;
    let var = xc.square()?.mean_axes(&[1], true)?;
    xc.div(var.add_scalar(LN_EPS)?.sqrt()?)
}

/// Channel layer norm with learnable per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, rng: &mut RngHandle) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), &[channels], Init::Const(1.0), rng),
            shift: store.add(&format!("{name}.shift"), &[channels], Init::Const(0.0), rng),
            channels,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = [1, self.channels, 1, 1];
        channel_norm(x)?
            .mul(p.get(self.gain).reshape(&shape)?)?
            .add(p.get(self.shift).reshape(&shape)?)
    }
}

fn per_channel<'t>(v: Var<'t>, f: &Var<'t>) -> Result<Var<'t>> {
    let fs = f.shape();
    let vs = v.shape();
    if fs.len() != 4 || vs.len() != 2 || vs[1] != fs[1] || (vs[0] != fs[0] && vs[0] != 1) {
        return Err(Error::shape(format!(
            "modulation {vs:?} does not match feature map {fs:?}"
        )));
    }
    v.reshape(&[vs[0], vs[1], 1, 1])
}

/// `γ ⊙ Norm(F) + τ` with per-sample, per-channel `γ, τ` of shape `[b,c]`.
pub fn modulate1<'t>(f: Var<'t>, gamma: Var<'t>, tau: Var<'t>) -> Result<Var<'t>> {
    let g = per_channel(gamma, &f)?;
    let t = per_channel(tau, &f)?;
    channel_norm(f)?.mul(g)?.add(t)
}

/// `γ ⊙ F + τ`.
pub fn modulate2<'t>(f: Var<'t>, gamma: Var<'t>, tau: Var<'t>) -> Result<Var<'t>> {
    let g = per_channel(gamma, &f)?;
    let t = per_channel(tau, &f)?;
    f.mul(g)?.add(t)
}

/// Two linear heads mapping the fused embedding to `(γ, τ)`.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub gamma: Linear,
    pub tau: Linear,
}

impl Modulation {
    pub fn init(store: &mut ParamStore, name: &str, embed: usize, channels: usize, rng: &mut RngHandle) -> Self {
        let std = 0.1 * fan_in_std(embed);
        Self {
            gamma: Linear::init_with(store, &format!("{name}.gamma"), embed, channels, Init::Normal(std), 1.0, rng),
            tau: Linear::init_with(store, &format!("{name}.tau"), embed, channels, Init::Normal(std), 0.0, rng),
        }
    }

    pub fn coefficients<'t>(&self, p: &Binding<'t>, embed: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.gamma.forward(p, embed)?, self.tau.forward(p, embed)?))
    }
}

/// Multi-head transposed (channel) attention.
#[derive(Clone, Debug)]
pub struct Mdta {
    pub qkv: Conv,
    pub qkv_dw: Conv,
    pub proj: Conv,
    pub temperature: ParamId,
    pub heads: usize,
    pub channels: usize,
}

impl Mdta {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, heads: usize, rng: &mut RngHandle) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Conv::init(store, &format!("{name}.qkv"), channels, 3 * channels, 1, 1, 1, rng),
            qkv_dw: Conv::init(store, &format!("{name}.qkv_dw"), 3 * channels, 3 * channels, 3, 1, 3 * channels, rng),
            proj: Conv::init(store, &format!("{name}.proj"), channels, channels, 1, 1, 1, rng),
            temperature: store.add(&format!("{name}.temperature"), &[heads], Init::Const(1.0), rng),
            heads,
            channels,
        })
    }

    /// Softmax-normalized `[b, heads, c/heads, c/heads]` attention maps.
    pub fn attention<'t>(&self, p: &Binding<'t>, f: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::shape(format!(
                "attention over {} channels got input {s:?}",
                self.channels
            )));
        }
        let (b, hw) = (s[0], s[2] * s[3]);
        let qkv = self.qkv_dw.forward(p, self.qkv.forward(p, f)?)?;
        let parts = qkv.chunk(3, 1)?;
        let split = [b, self.heads, self.channels / self.heads, hw];
        let q = l2_normalize_last(parts[0].reshape(&split)?)?;
        let k = l2_normalize_last(parts[1].reshape(&split)?)?;
        let v = parts[2].reshape(&split)?;
        let temp = p.get(self.temperature).reshape(&[1, self.heads, 1, 1])?;
        let attn = q.matmul(k.transpose_last()?)?.mul(temp)?.softmax_last()?;
        Ok((attn, v))
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let s = f.shape();
        let (attn, v) = self.attention(p, f)?;
        let out = attn.matmul(v)?.reshape(&s)?;
        self.proj.forward(p, out)
    }
}

fn l2_normalize_last<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let r = x.shape().len();
    let n = x.square()?.sum_axes(&[r - 1], true)?.add_scalar(L2_EPS)?.sqrt()?;
    x.div(n)
}

/// Gated depthwise-conv feed-forward network.
#[derive(Clone, Debug)]
pub struct Gdfn {
    pub expand: Conv,
    pub dw: Conv,
    pub proj: Conv,
    pub hidden: usize,
}

impl Gdfn {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, expansion: f64, rng: &mut RngHandle) -> Self {
        let hidden = ((channels as f64 * expansion) as usize).max(1);
        Self {
            expand: Conv::init(store, &format!("{name}.expand"), channels, 2 * hidden, 1, 1, 1, rng),
            dw: Conv::init(store, &format!("{name}.dw"), 2 * hidden, 2 * hidden, 3, 1, 2 * hidden, rng),
            proj: Conv::init(store, &format!("{name}.proj"), hidden, channels, 1, 1, 1, rng),
            hidden,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let h = self.dw.forward(p, self.expand.forward(p, f)?)?;
        let halves = h.chunk(2, 1)?;
        self.proj.forward(p, halves[0].gelu()?.mul(halves[1])?)
    }
}

/// Kernel-modulated transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub mod1: Modulation,
    pub attn: Mdta,
    pub mod2: Modulation,
    pub norm2: LayerNorm,
    pub ffn: Gdfn,
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        embed: usize,
        expansion: f64,
        rng: &mut RngHandle,
    ) -> Result<Self> {
        Ok(Self {
            mod1: Modulation::init(store, &format!("{name}.mod1"), embed, channels, rng),
            attn: Mdta::init(store, &format!("{name}.attn"), channels, heads, rng)?,
            mod2: Modulation::init(store, &format!("{name}.mod2"), embed, channels, rng),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), channels, rng),
            ffn: Gdfn::init(store, &format!("{name}.ffn"), channels, expansion, rng),
        })
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, f: Var<'t>, embed: Var<'t>) -> Result<Var<'t>> {
        let (g1, t1) = self.mod1.coefficients(p, embed)?;
        let (g2, t2) = self.mod2.coefficients(p, embed)?;
        let a = self.attn.forward(p, modulate1(f, g1, t1)?)?;
        let f1 = f.add(modulate2(a, g2, t2)?)?;
        f1.add(self.ffn.forward(p, self.norm2.forward(p, f1)?)?)
    }
}

/// Four 5x5 conv + LeakyReLU stages, global average pooling, linear head.
#[derive(Clone, Debug)]
pub struct KernelEstimator {
    pub convs: Vec<Conv>,
    pub head: Linear,
}

impl KernelEstimator {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        width: usize,
        code_dim: usize,
        zero_head: bool,
        rng: &mut RngHandle,
    ) -> Self {
        let convs = (0..4)
            .map(|i| {
                let cin = if i == 0 { in_ch } else { width };
                Conv::init(store, &format!("{name}.conv{i}"), cin, width, 5, 1, 1, rng)
            })
            .collect();
        let w_init = if zero_head {
            Init::Const(0.0)
        } else {
            Init::Normal(fan_in_std(width))
        };
        let head = Linear::init_with(store, &format!("{name}.head"), width, code_dim, w_init, 0.0, rng);
        Self { convs, head }
    }

    /// `[b, in_ch, h, w]` → `[b, code_dim]`.
    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(p, h)?.leaky_relu(0.2)?;
        }
        let pooled = h.mean_axes(&[2, 3], false)?;
        self.head.forward(p, pooled)
    }
}

/// Sinusoidal features `[b, dim]` of integer timesteps.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut row = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
        data.extend(row);
    }
    Tensor::new(&[t.len(), dim], data).expect("consistent feature shape")
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut RngHandle) -> Self {
        Self {
            l1: Linear::init(store, &format!("{name}.l1"), in_dim, out_dim, rng),
            l2: Linear::init(store, &format!("{name}.l2"), out_dim, out_dim, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.l2.forward(p, self.l1.forward(p, x)?.gelu()?)
    }
}
