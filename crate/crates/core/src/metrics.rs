//! Image and kernel quality measures.

use crate::degrade::blur_decimate;
use crate::error::{Error, Result};
use crate::kernels::BlurKernel;
use crate::tensor::{PaddingMode, Tensor};

/// Value reported for identical inputs, and the ceiling for everything else.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("psnr of {:?} and {:?}", a.shape(), b.shape())));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Mean absolute difference between two kernels of the same size.
pub fn kernel_l1(k_hat: &BlurKernel, k_gt: &BlurKernel) -> Result<f64> {
    if k_hat.size() != k_gt.size() {
        return Err(Error::shape(format!(
            "kernel sizes {} and {} differ",
            k_hat.size(),
            k_gt.size()
        )));
    }
    let n = k_gt.weights().len() as f64;
    Ok(k_hat.weights().iter().zip(k_gt.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Mean absolute difference between two kernel codes.
pub fn code_l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("code lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// PSNR between `(k̂ ⊗ x_hr)↓s` and a noiseless reference observation.
pub fn lr_consistency_psnr(k_hat: &BlurKernel, x_hr: &Tensor, y_ref: &Tensor, s: usize) -> Result<f64> {
    let y_hat = blur_decimate(x_hr, k_hat, s, PaddingMode::Replicate)?;
    psnr(&y_hat, y_ref, 1.0)
}
