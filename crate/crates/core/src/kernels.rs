//! Gaussian blur-kernel synthesis and the PCA kernel-code space.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::RngHandle;
use crate::tensor::{raw, Tensor};

/// Kernel side used for the isotropic family and the shared PCA space.
pub const ISO_KERNEL_SIZE: usize = 21;
/// Kernel side of the anisotropic family before padding into the PCA space.
pub const ANISO_KERNEL_SIZE: usize = 11;
pub const DEFAULT_CODE_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    Isotropic,
    Anisotropic,
    /// Produced by [`KernelPCA::decode`] or read from an external file.
    Estimated,
}

impl KernelKind {
    fn tag(self) -> &'static str {
        match self {
            KernelKind::Isotropic => "iso",
            KernelKind::Anisotropic => "aniso",
            KernelKind::Estimated => "estimated",
        }
    }

    fn from_tag(s: &str) -> Result<Self> {
        match s {
            "iso" => Ok(Self::Isotropic),
            "aniso" => Ok(Self::Anisotropic),
            "estimated" => Ok(Self::Estimated),
            other => Err(Error::Format(format!("unknown kernel kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelMeta {
    pub kind: KernelKind,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub noise_amp: f64,
}

impl KernelMeta {
    pub fn estimated() -> Self {
        Self {
            kind: KernelKind::Estimated,
            sigma_x: 0.0,
            sigma_y: 0.0,
            theta: 0.0,
            noise_amp: 0.0,
        }
    }
}

/// Square, odd-sized, sum-one blur kernel stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    meta: KernelMeta,
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
    }
    Ok(())
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("{name} must be positive, got {sigma}")));
    }
    Ok(())
}

fn normalize(weights: &mut [f64]) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::invalid("kernel weights do not have a positive sum"));
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(())
}

impl BlurKernel {
    /// Validates and renormalizes raw weights.
    pub fn from_weights(size: usize, mut weights: Vec<f64>, meta: KernelMeta) -> Result<Self> {
        check_size(size)?;
        if weights.len() != size * size {
            return Err(Error::shape(format!(
                "{} weights for a {size}x{size} kernel",
                weights.len()
            )));
        }
        normalize(&mut weights)?;
        Ok(Self { size, weights, meta })
    }

    pub fn delta(size: usize) -> Result<Self> {
        check_size(size)?;
        let mut weights = vec![0.0; size * size];
        weights[size * size / 2] = 1.0;
        Ok(Self {
            size,
            weights,
            meta: KernelMeta {
                kind: KernelKind::Isotropic,
                ..KernelMeta::estimated()
            },
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn meta(&self) -> &KernelMeta {
        &self.meta
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn center_weight(&self) -> f64 {
        self.weights[self.size * self.size / 2]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.size, self.size], self.weights.clone())
    }

    /// Centers the kernel inside a larger odd support, filling with zeros.
    pub fn pad_to(&self, size: usize) -> Result<Self> {
        check_size(size)?;
        if size < self.size {
            return Err(Error::invalid(format!(
                "cannot pad a {0}x{0} kernel down to {size}x{size}",
                self.size
            )));
        }
        let off = (size - self.size) / 2;
        let mut weights = vec![0.0; size * size];
        for i in 0..self.size {
            for j in 0..self.size {
                weights[(i + off) * size + j + off] = self.at(i, j);
            }
        }
        Ok(Self {
            size,
            weights,
            meta: self.meta,
        })
    }

    /// BDK1: magic, size u16, weights f64 LE, then a `key=value` text block.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let size = u16::try_from(self.size).map_err(|_| Error::invalid("kernel too large"))?;
        w.write_all(b"BDK1")?;
        w.write_all(&size.to_le_bytes())?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut meta = String::new();
        let m = &self.meta;
        let _ = writeln!(meta, "kind={}", m.kind.tag());
        let _ = writeln!(meta, "sigma_x={:?}", m.sigma_x);
        let _ = writeln!(meta, "sigma_y={:?}", m.sigma_y);
        let _ = writeln!(meta, "theta={:?}", m.theta);
        let _ = writeln!(meta, "noise_amp={:?}", m.noise_amp);
        w.write_all(meta.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 6 || &bytes[..4] != b"BDK1" {
            return Err(Error::Format("not a BDK1 kernel file".into()));
        }
        let size = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        check_size(size)?;
        let end = 6 + size * size * 8;
        if bytes.len() < end {
            return Err(Error::Format("truncated BDK1 weights".into()));
        }
        let weights: Vec<f64> = bytes[6..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let text = std::str::from_utf8(&bytes[end..])
            .map_err(|_| Error::Format("BDK1 metadata is not utf-8".into()))?;
        let mut meta = KernelMeta::estimated();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line '{line}'")))?;
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number for {key}: '{value}'")))
            };
            match key {
                "kind" => meta.kind = KernelKind::from_tag(value)?,
                "sigma_x" => meta.sigma_x = num()?,
                "sigma_y" => meta.sigma_y = num()?,
                "theta" => meta.theta = num()?,
                "noise_amp" => meta.noise_amp = num()?,
                _ => {}
            }
        }
        // Stored weights are taken verbatim so files round-trip bit-exactly.
        Ok(Self { size, weights, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Centered Gaussian sampled at integer offsets, normalized to sum one.
pub fn make_isotropic(size: usize, sigma: f64) -> Result<BlurKernel> {
    check_size(size)?;
    check_sigma("sigma", sigma)?;
    let c = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            weights.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    normalize(&mut weights)?;
    Ok(BlurKernel {
        size,
        weights,
        meta: KernelMeta {
            kind: KernelKind::Isotropic,
            sigma_x: sigma,
            sigma_y: sigma,
            theta: 0.0,
            noise_amp: 0.0,
        },
    })
}

/// Rotated Gaussian with covariance `R(θ)·diag(σx², σy²)·R(θ)ᵀ`; each weight
/// is then multiplied by `Uniform(1-a, 1+a)` and the result renormalized.
/// No random numbers are drawn when `noise_amp == 0`.
pub fn make_anisotropic(
    size: usize,
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
    noise_amp: f64,
    rng: &mut RngHandle,
) -> Result<BlurKernel> {
    check_size(size)?;
    check_sigma("sigma_x", sigma_x)?;
    check_sigma("sigma_y", sigma_y)?;
    if !theta.is_finite() {
        return Err(Error::invalid("theta must be finite"));
    }
    if !(0.0..=0.25).contains(&noise_amp) {
        return Err(Error::invalid(format!(
            "noise amplitude must lie in [0, 0.25], got {noise_amp}"
        )));
    }
    let (s, c) = theta.sin_cos();
    let (vx, vy) = (sigma_x * sigma_x, sigma_y * sigma_y);
    let a = c * c * vx + s * s * vy;
    let b = c * s * (vx - vy);
    let d = s * s * vx + c * c * vy;
    let det = a * d - b * b;
    let (ia, ib, id) = (d / det, -b / det, a / det);
    let center = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 - center, i as f64 - center);
            let q = ia * x * x + 2.0 * ib * x * y + id * y * y;
            weights.push((-0.5 * q).exp());
        }
    }
    if noise_amp > 0.0 {
        for w in weights.iter_mut() {
            *w *= rng.uniform(1.0 - noise_amp, 1.0 + noise_amp);
        }
    }
    normalize(&mut weights)?;
    Ok(BlurKernel {
        size,
        weights,
        meta: KernelMeta {
            kind: KernelKind::Anisotropic,
            sigma_x,
            sigma_y,
            theta,
            noise_amp,
        },
    })
}

/// The 8 isotropic 21x21 test kernels with widths 1.8, 2.0, ..., 3.2.
pub fn sample_gaussian8() -> Vec<BlurKernel> {
    (0..8)
        .map(|i| {
            let sigma = 1.8 + 0.2 * i as f64;
            make_isotropic(ISO_KERNEL_SIZE, sigma).expect("valid gaussian8 kernel")
        })
        .collect()
}

/// Kernel distributions used for training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelFamily {
    /// Width uniform in `[sigma_min, sigma_max]`.
    Isotropic {
        size: usize,
        sigma_min: f64,
        sigma_max: f64,
    },
    /// Independent axis widths, angle uniform in `[-π, π]`, multiplicative noise.
    Anisotropic {
        size: usize,
        sigma_min: f64,
        sigma_max: f64,
        noise_amp: f64,
    },
    /// Always the identity kernel.
    Delta { size: usize },
}

impl KernelFamily {
    pub fn isotropic_default() -> Self {
        Self::Isotropic {
            size: ISO_KERNEL_SIZE,
            sigma_min: 0.2,
            sigma_max: 4.0,
        }
    }

    pub fn anisotropic_default() -> Self {
        Self::Anisotropic {
            size: ANISO_KERNEL_SIZE,
            sigma_min: 0.6,
            sigma_max: 5.0,
            noise_amp: 0.25,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Self::Isotropic { size, .. } | Self::Anisotropic { size, .. } | Self::Delta { size } => *size,
        }
    }

    pub fn sample(&self, rng: &mut RngHandle) -> Result<BlurKernel> {
        match *self {
            Self::Isotropic {
                size,
                sigma_min,
                sigma_max,
            } => make_isotropic(size, rng.uniform(sigma_min, sigma_max)),
            Self::Anisotropic {
                size,
                sigma_min,
                sigma_max,
                noise_amp,
            } => {
                let sx = rng.uniform(sigma_min, sigma_max);
                let sy = rng.uniform(sigma_min, sigma_max);
                let theta = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
                make_anisotropic(size, sx, sy, theta, noise_amp, rng)
            }
            Self::Delta { size } => BlurKernel::delta(size),
        }
    }
}

/// Kernels drawn with equal probability from the default isotropic and
/// anisotropic families; anisotropic kernels are zero-padded to `size`.
pub fn pca_training_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<BlurKernel>> {
    let mut rng = RngHandle::new(seed);
    let iso = KernelFamily::isotropic_default();
    let aniso = KernelFamily::anisotropic_default();
    (0..count)
        .map(|_| {
            let k = if rng.bool() {
                iso.sample(&mut rng)?
            } else {
                aniso.sample(&mut rng)?
            };
            k.pad_to(size)
        })
        .collect()
}

/// Linear kernel-code space: `code = B·(k − mean)`, `k ≈ mean + Bᵀ·code`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPCA {
    size: usize,
    dim: usize,
    mean: Vec<f64>,
    /// `dim x size²`, orthonormal rows.
    basis: Vec<f64>,
    /// Round-trip MSE budget recorded at fit time.
    mse_threshold: f64,
}

/// Top-`d` principal directions of the flattened kernels.
pub fn fit_pca(kernels: &[BlurKernel], d: usize) -> Result<KernelPCA> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::invalid("fit_pca needs at least one kernel"))?;
    let size = first.size;
    let n = size * size;
    if d > n {
        return Err(Error::invalid(format!(
            "code dimension {d} exceeds kernel dimension {n}"
        )));
    }
    if kernels.len() < d {
        return Err(Error::invalid(format!(
            "{} samples cannot determine {d} principal directions",
            kernels.len()
        )));
    }
    if let Some(k) = kernels.iter().find(|k| k.size != size) {
        return Err(Error::shape(format!(
            "mixed kernel sizes {size} and {}",
            k.size
        )));
    }
    let count = kernels.len();
    let mut mean = vec![0.0; n];
    for k in kernels {
        for (m, w) in mean.iter_mut().zip(&k.weights) {
            *m += w;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut centered = Vec::with_capacity(count * n);
    for k in kernels {
        centered.extend(k.weights.iter().zip(&mean).map(|(w, m)| w - m));
    }
    let x = Tensor::from_parts(vec![count, n], centered);
    let cov = raw::matmul(&x, &x, true, false)?.scale(1.0 / count as f64);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, cov.data()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Vec::with_capacity(d * n);
    for &col in order.iter().take(d) {
        basis.extend(eig.eigenvectors.column(col).iter());
    }
    let tail: f64 = order.iter().skip(d).map(|&i| eig.eigenvalues[i].max(0.0)).sum();
    Ok(KernelPCA {
        size,
        dim: d,
        mean,
        basis,
        mse_threshold: 1.05 * tail / n as f64 + 1e-15,
    })
}

impl KernelPCA {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kernel_size(&self) -> usize {
        self.size
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn mse_threshold(&self) -> f64 {
        self.mse_threshold
    }

    pub fn from_parts(size: usize, dim: usize, mean: Vec<f64>, basis: Vec<f64>, mse_threshold: f64) -> Result<Self> {
        check_size(size)?;
        let n = size * size;
        if mean.len() != n || basis.len() != dim * n {
            return Err(Error::shape("PCA mean/basis lengths do not match size and dim"));
        }
        Ok(Self {
            size,
            dim,
            mean,
            basis,
            mse_threshold,
        })
    }

    pub fn encode(&self, k: &BlurKernel) -> Result<Vec<f64>> {
        if k.size != self.size {
            return Err(Error::shape(format!(
                "kernel is {0}x{0}, PCA expects {1}x{1}",
                k.size, self.size
            )));
        }
        let n = self.size * self.size;
        Ok((0..self.dim)
            .map(|r| {
                self.basis[r * n..(r + 1) * n]
                    .iter()
                    .zip(k.weights.iter().zip(&self.mean))
                    .map(|(b, (w, m))| b * (w - m))
                    .sum()
            })
            .collect())
    }

    /// `mean + Bᵀ·code` without clamping or renormalization.
    pub fn reconstruct_raw(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.dim {
            return Err(Error::shape(format!(
                "code of length {} for a {}-dim PCA",
                code.len(),
                self.dim
            )));
        }
        let n = self.size * self.size;
        let mut w = self.mean.clone();
        for (r, &c) in code.iter().enumerate() {
            for (wi, b) in w.iter_mut().zip(&self.basis[r * n..(r + 1) * n]) {
                *wi += c * b;
            }
        }
        Ok(w)
    }

    /// Reconstructs a kernel, clamps negative weights to zero and
    /// renormalizes. Falls back to the identity kernel if nothing positive
    /// remains.
    pub fn decode(&self, code: &[f64]) -> Result<BlurKernel> {
        let mut w = self.reconstruct_raw(code)?;
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        if w.iter().sum::<f64>() <= 0.0 {
            return BlurKernel::delta(self.size);
        }
        BlurKernel::from_weights(self.size, w, KernelMeta::estimated())
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let n = self.size * self.size;
        vec![
            (
                format!("{prefix}.meta"),
                Tensor::from_parts(vec![3], vec![self.size as f64, self.dim as f64, self.mse_threshold]),
            ),
            (format!("{prefix}.mean"), Tensor::from_parts(vec![n], self.mean.clone())),
            (
                format!("{prefix}.basis"),
                Tensor::from_parts(vec![self.dim, n], self.basis.clone()),
            ),
        ]
    }

    pub fn from_tensors(prefix: &str, tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |suffix: &str| {
            let key = format!("{prefix}.{suffix}");
            tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing tensor '{key}'")))
        };
        let meta = find("meta")?;
        if meta.numel() != 3 {
            return Err(Error::Format("bad PCA meta tensor".into()));
        }
        let m = meta.data();
        Self::from_parts(
            m[0] as usize,
            m[1] as usize,
            find("mean")?.data().to_vec(),
            find("basis")?.data().to_vec(),
            m[2],
        )
    }

    /// BDP1: magic, d u32, size u16, mean, basis, threshold; f64 LE.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"BDP1")?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.size as u16).to_le_bytes())?;
        for v in self.mean.iter().chain(&self.basis).chain([&self.mse_threshold]) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 10 || &bytes[..4] != b"BDP1" {
            return Err(Error::Format("not a BDP1 file".into()));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let size = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let n = size * size;
        let expected = 10 + (n + dim * n + 1) * 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "BDP1 length {} but header implies {expected}",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[10..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_parts(size, dim, vals[..n].to_vec(), vals[n..n + dim * n].to_vec(), vals[n + dim * n])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
