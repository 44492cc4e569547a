//! Decoding raw network outputs into metric depth.
//!
//! Two decoders are provided. The scalar sigmoid decoder maps a single
//! channel through an inverse-depth sigmoid. The multichannel decoder
//! softmax-activates N channels and takes the weighted mean of N depth
//! bins laid out in geometric progression between `d_min` and `d_max`,
//! `d_i = d_min · (d_max/d_min)^(i/N)`. As N grows, the uniform-logit
//! decode converges to `(d_max - d_min) / (ln d_max - ln d_min)`, which
//! guides the choice of range so training starts at a plausible depth.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{DepthMap, Grid};

/// Default depth range in meters.
pub const DEFAULT_D_MIN: f64 = 0.1;
pub const DEFAULT_D_MAX: f64 = 100.0;
/// Default channel count for the multichannel decoder.
pub const DEFAULT_N_BINS: usize = 64;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid depth range: need 0 < d_min < d_max and N >= 2, got {0}")]
    InvalidRange(String),
    #[error("logits have {got} channels but the bin spec has {expected}")]
    ChannelMismatch { got: usize, expected: usize },
}

/// Geometric-progression depth bins on `(d_min, d_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    d_min: f64,
    d_max: f64,
    ratio: f64,
    values: Vec<f64>,
}

impl BinSpec {
    #[inline]
    pub fn n_bins(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Constant ratio `q = d_{i+1} / d_i = (d_max/d_min)^(1/N)`.
    #[inline]
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    #[inline]
    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    #[inline]
    pub fn d_max(&self) -> f64 {
        self.d_max
    }
}

/// H×W×N raw channel outputs, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LogitsMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * channels, "logits length mismatch");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn check_range(d_min: f64, d_max: f64) -> Result<(), CodecError> {
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(CodecError::InvalidRange(format!("d_min={d_min}, d_max={d_max}")));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse-depth sigmoid decode:
/// `1/d = 1/d_max + sigmoid(x) · (1/d_min - 1/d_max)`, so `d ∈ (d_min, d_max)`
/// and `d` is strictly decreasing in `x`.
pub fn decode_sigmoid(x: f64, d_min: f64, d_max: f64) -> Result<f64, CodecError> {
    check_range(d_min, d_max)?;
    let inv = 1.0 / d_max + sigmoid(x) * (1.0 / d_min - 1.0 / d_max);
    Ok(1.0 / inv)
}

/// Map version of [`decode_sigmoid`].
pub fn decode_sigmoid_map(x: &Grid<f64>, d_min: f64, d_max: f64) -> Result<DepthMap, CodecError> {
    check_range(d_min, d_max)?;
    Ok(x.map(|&v| decode_sigmoid(v, d_min, d_max).expect("range checked")))
}

/// Build `N` depth bins `d_i = d_min · (d_max/d_min)^(i/N)`, `i = 1..N`,
/// so `d_N = d_max` and consecutive bins share the ratio `q`.
pub fn make_bins(d_min: f64, d_max: f64, n_bins: usize) -> Result<BinSpec, CodecError> {
    check_range(d_min, d_max)?;
    if n_bins < 2 {
        return Err(CodecError::InvalidRange(format!("N={n_bins}")));
    }
    let log_span = (d_max / d_min).ln();
    let mut values: Vec<f64> = (1..=n_bins)
        .map(|i| d_min * (log_span * i as f64 / n_bins as f64).exp())
        .collect();
    *values.last_mut().unwrap() = d_max;
    Ok(BinSpec {
        d_min,
        d_max,
        ratio: (log_span / n_bins as f64).exp(),
        values,
    })
}

/// Softmax-weighted mean of arbitrary per-channel values.
/// Softmax is computed with max-subtraction so any finite logits are safe.
pub fn weighted_mean_decode(logits: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), values.len());
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut z_sum = 0.0;
    let mut acc = 0.0;
    for (&x, &d) in logits.iter().zip(values) {
        let z = (x - max).exp();
        z_sum += z;
        acc += z * d;
    }
    acc / z_sum
}

/// Decode one pixel's logits against a bin spec.
pub fn decode_logits(logits: &[f64], bins: &BinSpec) -> Result<f64, CodecError> {
    if logits.len() != bins.n_bins() {
        return Err(CodecError::ChannelMismatch {
            got: logits.len(),
            expected: bins.n_bins(),
        });
    }
    Ok(weighted_mean_decode(logits, bins.values()))
}

/// Decode one pixel and its gradient w.r.t. the logits:
/// with `z = softmax(x)` and `d = Σ z_i d_i`, `∂d/∂x_j = z_j (d_j - d)`.
pub fn decode_logits_grad(logits: &[f64], bins: &BinSpec) -> Result<(f64, Vec<f64>), CodecError> {
    if logits.len() != bins.n_bins() {
        return Err(CodecError::ChannelMismatch {
            got: logits.len(),
            expected: bins.n_bins(),
        });
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut z: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z_sum: f64 = z.iter().sum();
    for v in &mut z {
        *v /= z_sum;
    }
    let d: f64 = z.iter().zip(bins.values()).map(|(&zi, &di)| zi * di).sum();
    let grad = z
        .iter()
        .zip(bins.values())
        .map(|(&zi, &di)| zi * (di - d))
        .collect();
    Ok((d, grad))
}

/// Decode a full logits map; each pixel lands in `[d_1, d_N]`.
pub fn decode_multichannel(logits: &LogitsMap, bins: &BinSpec) -> Result<DepthMap, CodecError> {
    if logits.channels() != bins.n_bins() {
        return Err(CodecError::ChannelMismatch {
            got: logits.channels(),
            expected: bins.n_bins(),
        });
    }
    let (w, h, n) = (logits.width(), logits.height(), logits.channels());
    let mut depth = DepthMap::filled(w, h, 0.0);
    depth
        .data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            let mut buf = vec![0.0f64; n];
            for (x, out) in row.iter_mut().enumerate() {
                for (b, &v) in buf.iter_mut().zip(logits.pixel(x, y)) {
                    *b = v as f64;
                }
                *out = weighted_mean_decode(&buf, bins.values());
            }
        });
    Ok(depth)
}

/// Arithmetic mean of the bin values: the decode of an exactly uniform
/// softmax, i.e. the expected prediction of a freshly initialized network.
pub fn uniform_init_mean(bins: &BinSpec) -> f64 {
    bins.values().iter().sum::<f64>() / bins.n_bins() as f64
}

/// Large-N limit of [`uniform_init_mean`]:
/// `(d_max - d_min) / (ln d_max - ln d_min)`.
pub fn limit_mean(d_min: f64, d_max: f64) -> Result<f64, CodecError> {
    check_range(d_min, d_max)?;
    Ok((d_max - d_min) / (d_max.ln() - d_min.ln()))
}

/// Rescale every bin by `fx / f_base` so one network serves cameras with
/// different focal lengths. The bin ratio `q` is unchanged.
pub fn adapt_bins_to_camera(bins: &BinSpec, fx: f64, f_base: f64) -> BinSpec {
    assert!(fx > 0.0 && f_base > 0.0, "focal lengths must be positive");
    let s = fx / f_base;
    BinSpec {
        d_min: bins.d_min * s,
        d_max: bins.d_max * s,
        ratio: bins.ratio,
        values: bins.values.iter().map(|&v| v * s).collect(),
    }
}
