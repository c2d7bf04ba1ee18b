//! Blur, decimate and add noise: `y = (k ⊗ x)↓s + n`.
//!
//! The convolution is a true convolution (kernel flipped) with replicate
//! boundaries by default; decimation keeps pixel (0,0) of every `s x s` block;
//! noise is added after decimation.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernels::BlurKernel;
use crate::rng::RngHandle;
use crate::tensor::{raw, PaddingMode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kernel: BlurKernel,
    pub scale: usize,
    pub noise_sigma: f64,
    pub boundary: PaddingMode,
}

impl DegradationSpec {
    pub fn new(kernel: BlurKernel, scale: usize, noise_sigma: f64) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        check_sigma(noise_sigma)?;
        Ok(Self {
            kernel,
            scale,
            noise_sigma,
            boundary: PaddingMode::Replicate,
        })
    }

    pub fn with_boundary(mut self, boundary: PaddingMode) -> Self {
        self.boundary = boundary;
        self
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// Views `[c,h,w]` or `[b,c,h,w]` as rank 4, returning the original shape.
fn as_batch(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    match x.rank() {
        3 => Ok((x.unsqueeze0(), x.shape().to_vec())),
        4 => Ok((x.clone(), x.shape().to_vec())),
        r => Err(Error::shape(format!("expected a [c,h,w] or [b,c,h,w] image, got rank {r}"))),
    }
}

fn check_divisible(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!(
            "image extents {h}x{w} are not divisible by scale {s}"
        )));
    }
    Ok(())
}

/// Depthwise weight `[c,1,n,n]` holding the flipped kernel.
fn depthwise_weight(k: &BlurKernel, channels: usize) -> Tensor {
    let n = k.size();
    let mut flipped = k.weights().to_vec();
    flipped.reverse();
    let mut data = Vec::with_capacity(channels * n * n);
    for _ in 0..channels {
        data.extend_from_slice(&flipped);
    }
    Tensor::from_parts(vec![channels, 1, n, n], data)
}

/// Noise-free `(k ⊗ x)↓s` on plain tensors.
pub fn blur_decimate(x: &Tensor, k: &BlurKernel, s: usize, boundary: PaddingMode) -> Result<Tensor> {
    let (xb, shape) = as_batch(x)?;
    let (c, h, w) = (xb.shape()[1], xb.shape()[2], xb.shape()[3]);
    check_divisible(h, w, s)?;
    let half = k.size() / 2;
    let padded = raw::pad2d(&xb, [half; 4], boundary)?;
    let blurred = raw::conv2d_forward(&padded, &depthwise_weight(k, c), 1, c)?;
    let y = raw::decimate(&blurred, s)?;
    restore_rank(y, shape.len())
}

/// Adjoint of [`blur_decimate`].
pub fn blur_decimate_adjoint(
    u: &Tensor,
    k: &BlurKernel,
    s: usize,
    boundary: PaddingMode,
) -> Result<Tensor> {
    let (ub, shape) = as_batch(u)?;
    if s == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    let (c, h, w) = (ub.shape()[1], ub.shape()[2] * s, ub.shape()[3] * s);
    let half = k.size() / 2;
    let up = raw::zero_insert(&ub, s);
    let padded_hw = (h + 2 * half, w + 2 * half);
    let g = raw::conv2d_input_grad(&up, &depthwise_weight(k, c), 1, c, padded_hw)?;
    let x = raw::pad2d_adjoint(&g, (h, w), [half; 4], boundary);
    restore_rank(x, shape.len())
}

fn restore_rank(t: Tensor, rank: usize) -> Result<Tensor> {
    if rank == 3 {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

/// Differentiable `(k ⊗ x)↓s` for `x [b,c,h,w]` on a tape; `k` is a constant.
pub fn blur_decimate_var<'t>(x: Var<'t>, k: &BlurKernel, s: usize, boundary: PaddingMode) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected [b,c,h,w], got {shape:?}")));
    }
    check_divisible(shape[2], shape[3], s)?;
    let c = shape[1];
    let w = x.tape().constant(depthwise_weight(k, c));
    x.conv2d(w, 1, k.size() / 2, boundary, c)?.decimate(s)
}

/// `y = (k ⊗ x)↓s + n` for `x [c,h,w]` (or batched).
pub fn apply(spec: &DegradationSpec, x: &Tensor, rng: &mut RngHandle) -> Result<Tensor> {
    let y = blur_decimate(x, &spec.kernel, spec.scale, spec.boundary)?;
    awgn(&y, spec.noise_sigma, rng)
}

/// `x + N(0, σ²)`; draws nothing when `σ == 0`.
pub fn awgn(x: &Tensor, sigma: f64, rng: &mut RngHandle) -> Result<Tensor> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let noise = Tensor::randn(x.shape(), rng);
    x.zip_map(&noise, |v, n| v + sigma * n)
}

/// Differentiable `‖y − (k ⊗ x̂₀)↓s‖²` (sum of squares).
pub fn fidelity<'t>(
    y: &Tensor,
    k: &BlurKernel,
    x0_hat: Var<'t>,
    s: usize,
    boundary: PaddingMode,
) -> Result<Var<'t>> {
    let x = if x0_hat.shape().len() == 3 {
        let mut shape = vec![1];
        shape.extend(x0_hat.shape());
        x0_hat.reshape(&shape)?
    } else {
        x0_hat
    };
    let pred = blur_decimate_var(x, k, s, boundary)?;
    let (yb, _) = as_batch(y)?;
    if yb.shape() != pred.shape().as_slice() {
        return Err(Error::shape(format!(
            "observation {:?} does not match degraded estimate {:?}",
            y.shape(),
            pred.shape()
        )));
    }
    pred.sub(x.tape().constant(yb))?.square()?.sum()
}

/// Convenience: fidelity value for plain tensors.
pub fn fidelity_value(y: &Tensor, k: &BlurKernel, x0_hat: &Tensor, s: usize) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(x0_hat.clone());
    Ok(fidelity(y, k, x, s, PaddingMode::Replicate)?.value().item()?)
}

fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// `[n_out, n_in]` bicubic interpolation matrix with half-pixel alignment,
/// clamped borders, and a widened (antialiasing) kernel when shrinking.
pub fn bicubic_matrix(n_in: usize, n_out: usize) -> Result<Tensor> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::invalid("bicubic resize to or from an empty extent"));
    }
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let u = (i as f64 + 0.5) / scale - 0.5;
        let lo = (u - support).floor() as isize;
        let hi = (u + support).ceil() as isize;
        let row = &mut m[i * n_in..(i + 1) * n_in];
        let mut total = 0.0;
        for j in lo..=hi {
            let wgt = keys_cubic((u - j as f64) / stretch);
            if wgt == 0.0 {
                continue;
            }
            let src = j.clamp(0, n_in as isize - 1) as usize;
            row[src] += wgt;
            total += wgt;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_parts(vec![n_out, n_in], m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeDirection {
    Up,
    Down,
}

/// Resizes the last two axes by the rational factor `num/den`, enlarging for
/// [`ResizeDirection::Up`] and shrinking for [`ResizeDirection::Down`].
pub fn bicubic_resize(x: &Tensor, factor: (usize, usize), direction: ResizeDirection) -> Result<Tensor> {
    let (num, den) = factor;
    if num == 0 || den == 0 {
        return Err(Error::invalid("resize factor must be positive"));
    }
    let (mul, div) = match direction {
        ResizeDirection::Up => (num, den),
        ResizeDirection::Down => (den, num),
    };
    let r = x.rank();
    if r < 2 {
        return Err(Error::shape("resize needs rank >= 2"));
    }
    let target = |n: usize| {
        if (n * mul) % div != 0 {
            Err(Error::invalid(format!(
                "extent {n} scaled by {mul}/{div} is not an integer"
            )))
        } else {
            Ok(n * mul / div)
        }
    };
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    resize_to(x, target(h)?, target(w)?)
}

/// Bicubic resize of the last two axes to explicit extents.
pub fn resize_to(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ah = bicubic_matrix(h, out_h)?;
    let aw = bicubic_matrix(w, out_w)?;
    let rows = raw::matmul(&ah, x, false, false)?;
    raw::matmul(&rows, &aw, false, true)
}

/// One row of a degradation manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub hr_path: PathBuf,
    pub kernel_path: PathBuf,
    pub scale: usize,
    pub noise_sigma: f64,
}

/// Parses `hr_path<TAB>kernel_path<TAB>s<TAB>noise_sigma` lines. Blank lines
/// and lines starting with `#` are skipped; relative paths resolve against
/// `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", no + 1));
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let scale: usize = fields[2].trim().parse().map_err(|_| bad("bad scale"))?;
        let noise_sigma: f64 = fields[3].trim().parse().map_err(|_| bad("bad noise sigma"))?;
        if scale == 0 {
            return Err(bad("scale must be at least 1"));
        }
        check_sigma(noise_sigma).map_err(|_| bad("noise sigma must be >= 0"))?;
        out.push(ManifestEntry {
            hr_path: base.join(fields[0]),
            kernel_path: base.join(fields[1]),
            scale,
            noise_sigma,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}
