//! Monocular depth evaluation metrics.
//!
//! The standard error set (Abs Rel, Sq Rel, RMSE, RMSE log) and δ-threshold
//! accuracies over ground-truth pixels inside a configured depth range, with
//! optional median ("GT") scaling that removes a global scale factor before
//! evaluation. Full-scale methods are judged without median scaling; the
//! option exists for comparison against scale-ambiguous baselines.

use thiserror::Error;

use crate::grid::{DepthMap, Grid, Mask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no valid ground-truth pixels in the evaluation range")]
    NoValidPixels,
    #[error("cannot aggregate an empty result list")]
    EmptyList,
}

/// One evaluation outcome; error metrics lower is better, δ higher is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthEvalResult {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

/// Evaluation protocol knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Multiply predictions by `median(gt) / median(pred)` first.
    pub use_median_scaling: bool,
    /// Ground-truth pixels outside `[min_depth, max_depth]` are ignored.
    pub min_depth: f64,
    pub max_depth: f64,
    /// Restrict evaluation to the Eigen crop of the frame.
    pub eigen_crop: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            use_median_scaling: false,
            min_depth: 1e-3,
            max_depth: 80.0,
            eigen_crop: false,
        }
    }
}

/// The Eigen evaluation crop: rows `[0.40810811, 0.99189189)·H`,
/// columns `[0.03594771, 0.96405229)·W`.
pub fn eigen_crop_mask(width: usize, height: usize) -> Mask {
    let y0 = (0.40810811 * height as f64) as usize;
    let y1 = (0.99189189 * height as f64) as usize;
    let x0 = (0.03594771 * width as f64) as usize;
    let x1 = (0.96405229 * width as f64) as usize;
    Mask::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn valid_pairs(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: Option<&Mask>,
    cfg: &EvalConfig,
) -> Vec<(f64, f64)> {
    assert!(pred.same_size(gt), "prediction/ground-truth size mismatch");
    if let Some(m) = mask {
        assert!(pred.same_size(m), "mask size mismatch");
    }
    let crop = cfg.eigen_crop.then(|| eigen_crop_mask(pred.width(), pred.height()));
    pred.enumerate()
        .zip(gt.data())
        .filter_map(|(((x, y), &p), &g)| {
            if g < cfg.min_depth || g > cfg.max_depth {
                return None;
            }
            if let Some(m) = mask {
                if !*m.at(x, y) {
                    return None;
                }
            }
            if let Some(c) = &crop {
                if !*c.at(x, y) {
                    return None;
                }
            }
            Some((p, g))
        })
        .collect()
}

/// Scale `pred` by `median(gt) / median(pred)` over valid pixels; returns the
/// scaled map and the factor.
pub fn median_scale(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: Option<&Mask>,
    cfg: &EvalConfig,
) -> Result<(DepthMap, f64), MetricsError> {
    let pairs = valid_pairs(pred, gt, mask, cfg);
    if pairs.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    let mut p: Vec<f64> = pairs.iter().map(|&(p, _)| p).collect();
    let mut g: Vec<f64> = pairs.iter().map(|&(_, g)| g).collect();
    let factor = median(&mut g) / median(&mut p);
    Ok((pred.map(|&v| v * factor), factor))
}

/// Evaluate a prediction over valid ground-truth pixels.
///
/// `abs_rel = mean |p-g| / g`, `sq_rel = mean (p-g)²/g`,
/// `rmse = sqrt(mean (p-g)²)`, `rmse_log = sqrt(mean (ln p - ln g)²)`,
/// `δ_n` = fraction with `max(p/g, g/p) < 1.25^n` (strict).
pub fn evaluate(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: Option<&Mask>,
    cfg: &EvalConfig,
) -> Result<DepthEvalResult, MetricsError> {
    let scaled;
    let pred = if cfg.use_median_scaling {
        scaled = median_scale(pred, gt, mask, cfg)?.0;
        &scaled
    } else {
        pred
    };
    let pairs = valid_pairs(pred, gt, mask, cfg);
    if pairs.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    let n = pairs.len() as f64;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut d1 = 0usize;
    let mut d2 = 0usize;
    let mut d3 = 0usize;
    for &(p, g) in &pairs {
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        d1 += usize::from(ratio < 1.25);
        d2 += usize::from(ratio < 1.25 * 1.25);
        d3 += usize::from(ratio < 1.25 * 1.25 * 1.25);
    }
    Ok(DepthEvalResult {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: d1 as f64 / n,
        delta2: d2 as f64 / n,
        delta3: d3 as f64 / n,
        n_pixels: pairs.len(),
    })
}

/// Pixel-count-weighted mean of several evaluations.
pub fn aggregate(results: &[DepthEvalResult]) -> Result<DepthEvalResult, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let total: usize = results.iter().map(|r| r.n_pixels).sum();
    let tf = total as f64;
    let weighted = |f: fn(&DepthEvalResult) -> f64| -> f64 {
        results
            .iter()
            .map(|r| f(r) * r.n_pixels as f64)
            .sum::<f64>()
            / tf
    };
    Ok(DepthEvalResult {
        abs_rel: weighted(|r| r.abs_rel),
        sq_rel: weighted(|r| r.sq_rel),
        rmse: weighted(|r| r.rmse),
        rmse_log: weighted(|r| r.rmse_log),
        delta1: weighted(|r| r.delta1),
        delta2: weighted(|r| r.delta2),
        delta3: weighted(|r| r.delta3),
        n_pixels: total,
    })
}
