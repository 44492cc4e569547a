//! Reference training losses as pure per-pixel functions.
//!
//! These reproduce the loss surfaces a trainer would backpropagate through:
//! the SSIM + L1 photometric reconstruction loss and the Laplacian
//! negative-log-likelihood distillation loss on log-depth. Gradients are
//! provided in closed form for the distillation loss so they can be checked
//! against finite differences.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{DepthMap, Grid, Image, Mask};

/// SSIM stabilizing constants for a `[0, 1]` dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("depth maps must be strictly positive")]
    NonPositiveDepth,
    #[error("mask excludes every pixel")]
    EmptyMask,
}

/// Weights of the photometric loss, `α` on the SSIM term and `β` on L1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PhotometricWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta: 0.15,
        }
    }
}

/// Per-pixel log of the Laplacian scale predicted alongside depth.
pub type UncertaintyMap = Grid<f64>;

fn check_same_shape(a: &Image, b: &Image) -> Result<(), LossError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Per-pixel SSIM between two images with 3×3 mean/variance windows
/// (replicate border), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<Grid<f64>, LossError> {
    check_same_shape(a, b)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let mut out = Grid::filled(w, h, 0.0);
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += ssim_window(a, b, x, y, ch);
                }
                *v = acc / c as f64;
            }
        });
    Ok(out)
}

fn ssim_window(a: &Image, b: &Image, x: usize, y: usize, ch: usize) -> f64 {
    let (w, h) = (a.width() as isize, a.height() as isize);
    let mut sa = 0.0;
    let mut sb = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            let sx = (x as isize + dx).clamp(0, w - 1) as usize;
            let sy = (y as isize + dy).clamp(0, h - 1) as usize;
            let va = a.pixel(sx, sy)[ch];
            let vb = b.pixel(sx, sy)[ch];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let n = 9.0;
    let mu_a = sa / n;
    let mu_b = sb / n;
    let var_a = saa / n - mu_a * mu_a;
    let var_b = sbb / n - mu_b * mu_b;
    let cov = sab / n - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Photometric reconstruction loss
/// `l = α · (1 - SSIM) / 2 + β · mean_c |I - I'|` per pixel.
pub fn photometric_loss(
    target: &Image,
    reconstructed: &Image,
    w: &PhotometricWeights,
) -> Result<Grid<f64>, LossError> {
    check_same_shape(target, reconstructed)?;
    let similarity = ssim(target, reconstructed)?;
    let (width, c) = (target.width(), target.channels());
    let mut out = similarity;
    out.data_mut()
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                let pt = target.pixel(x, y);
                let pr = reconstructed.pixel(x, y);
                let l1: f64 = pt
                    .iter()
                    .zip(pr)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / c as f64;
                *v = w.alpha * (1.0 - *v) / 2.0 + w.beta * l1;
            }
        });
    Ok(out)
}

/// Scalar distillation loss and its partial derivatives.
///
/// `l = |ln d - ln d_pseudo| / σ + ln σ` with `σ = exp(log_sigma)`;
/// at `d = d_pseudo` the subgradient 0 is used for the absolute value.
pub fn distill_loss_scalar(d: f64, d_pseudo: f64, log_sigma: f64) -> (f64, f64, f64) {
    let r = d.ln() - d_pseudo.ln();
    let inv_sigma = (-log_sigma).exp();
    let loss = r.abs() * inv_sigma + log_sigma;
    let d_d = if r == 0.0 {
        0.0
    } else {
        r.signum() * inv_sigma / d
    };
    let d_ls = 1.0 - r.abs() * inv_sigma;
    (loss, d_d, d_ls)
}

/// Per-pixel Laplacian self-distillation loss on log-depth.
pub fn distill_loss(
    d: &DepthMap,
    d_pseudo: &DepthMap,
    log_sigma: &UncertaintyMap,
) -> Result<Grid<f64>, LossError> {
    if !d.same_size(d_pseudo) || !d.same_size(log_sigma) {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{} vs {}x{} vs {}x{}",
            d.width(),
            d.height(),
            d_pseudo.width(),
            d_pseudo.height(),
            log_sigma.width(),
            log_sigma.height()
        )));
    }
    if d.data().iter().any(|&v| v <= 0.0) || d_pseudo.data().iter().any(|&v| v <= 0.0) {
        return Err(LossError::NonPositiveDepth);
    }
    let mut out = Grid::filled(d.width(), d.height(), 0.0);
    let w = d.width();
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = distill_loss_scalar(*d.at(x, y), *d_pseudo.at(x, y), *log_sigma.at(x, y)).0;
            }
        });
    Ok(out)
}

/// Mean of `loss` over pixels where `mask` is true.
pub fn masked_mean(loss: &Grid<f64>, mask: &Mask) -> Result<f64, LossError> {
    if !loss.same_size(mask) {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            loss.width(),
            loss.height(),
            mask.width(),
            mask.height()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &keep) in loss.data().iter().zip(mask.data()) {
        if keep {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok(sum / count as f64)
}
