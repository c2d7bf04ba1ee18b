//! Image sources for training and evaluation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::read_png;
use crate::rng::RngHandle;
use crate::tensor::Tensor;

/// In-memory collection of `[3,h,w]` images in `[0,1]`.
#[derive(Clone, Debug, Default)]
pub struct ImageCorpus {
    images: Vec<Tensor>,
}

impl ImageCorpus {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        if let Some(bad) = images.iter().find(|t| t.rank() != 3 || t.shape()[0] != 3) {
            return Err(Error::shape(format!("corpus image has shape {:?}", bad.shape())));
        }
        Ok(Self { images })
    }

    /// `count` procedural images of `size x size` pixels.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Self {
        let root = RngHandle::new(seed);
        let images = (0..count)
            .map(|i| synthetic_image(size, size, &mut root.split_index(i as u64)))
            .collect();
        Self { images }
    }

    /// Every `*.png` in `dir`, sorted by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::invalid(format!("no PNG images in {}", dir.display())));
        }
        Self::new(paths.iter().map(read_png).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }
}

/// Smooth background, a few rectangles and discs, and an oriented sinusoid.
pub fn synthetic_image(h: usize, w: usize, rng: &mut RngHandle) -> Tensor {
    let color = |rng: &mut RngHandle| [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let base = color(rng);
    let tilt = [rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)];
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = base[c] + tilt[0] * (y as f64 / h as f64 - 0.5) + tilt[1] * (x as f64 / w as f64 - 0.5);
                img[c * h * w + y * w + x] = v;
            }
        }
    }
    let shapes = rng.int_inclusive(3, 6);
    for _ in 0..shapes {
        let col = color(rng);
        let cy = rng.uniform(0.0, h as f64);
        let cx = rng.uniform(0.0, w as f64);
        let ry = rng.uniform(2.0, h as f64 / 3.0);
        let rx = rng.uniform(2.0, w as f64 / 3.0);
        let disc = rng.bool();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        img[c * h * w + y * w + x] = col[c];
                    }
                }
            }
        }
    }
    let freq = rng.uniform(0.2, 1.2);
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let amp = rng.uniform(0.03, 0.12);
    let (sa, ca) = angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let wave = amp * (freq * (x as f64 * ca + y as f64 * sa)).sin();
            for c in 0..3 {
                let v = &mut img[c * h * w + y * w + x];
                *v = (*v + wave).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], img).expect("consistent image shape")
}

/// `[3,p,p]` window at `(top, left)`, optionally mirrored left-right.
pub fn crop(img: &Tensor, top: usize, left: usize, p: usize, hflip: bool) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if top + p > h || left + p > w {
        return Err(Error::invalid(format!(
            "crop {p}x{p} at ({top},{left}) exceeds image {h}x{w}"
        )));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(3 * p * p);
    for c in 0..3 {
        for y in 0..p {
            for x in 0..p {
                let sx = if hflip { p - 1 - x } else { x };
                out.push(d[c * h * w + (top + y) * w + left + sx]);
            }
        }
    }
    Tensor::new(&[3, p, p], out)
}
