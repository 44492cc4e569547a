//! Optimization-based fusion of dense network depth with sparse
//! visual-odometry depth points.
//!
//! All algebra runs on log-depth. Each superpixel segment is assumed to be
//! geometrically coherent: its network depth is correct up to one scale
//! factor. The fusion is a nested convex problem:
//!
//! - **inner** (per segment): the log-scale aligning the segment's network
//!   depth to its VO points has the closed form
//!   `log v = mean(log d_vo - log d_net)`;
//! - **outer** (across segments): the corrected per-segment log-depths
//!   minimize a quadratic balancing inter-segment consistency (weight `λ₀`),
//!   the VO targets (weight `λ₁`, only where VO points exist), and the
//!   network prior (weight `λ₂`). Its KKT system is `A·lg = B` with
//!   `A = diag(N·λ₀ + λ₁ᵏ + λ₂) - λ₀·𝟙𝟙ᵀ`, which a Sherman–Morrison
//!   identity solves in O(N).
//!
//! A pixel-level reference optimizer ([`pixelwise_oracle`]) minimizes the
//! same objective without the segment decomposition; it is quadratic in the
//! pixel count and capped to tiny images, which is exactly why the
//! segment-wise path exists.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{DepthMap, Grid, Image};
use crate::slic::{rgb_to_lab, segment, Segmentation, SlicError, SlicParams};

/// Pixel cap for [`pixelwise_oracle`]; above this the O(n²) pair objective
/// is no longer worth solving directly.
pub const ORACLE_PIXEL_CAP: usize = 256;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("segment has no visual-odometry points")]
    NoVoPoints,
    #[error("at least one segment is required")]
    NoSegments,
    #[error("outer system is singular for these weights (need lambda0 + lambda2 > 0, and a VO point or lambda2 > 0)")]
    SingularSystem,
    #[error("image has {pixels} pixels, above the {cap}-pixel oracle cap")]
    TooLarge { pixels: usize, cap: usize },
    #[error(transparent)]
    Slic(#[from] SlicError),
}

/// Outer-optimization weights; all nonnegative with `λ₀ + λ₂ > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    /// Inter-segment consistency.
    pub lambda0: f64,
    /// Pull toward the VO-aligned target, applied only to segments with VO.
    pub lambda1: f64,
    /// Pull toward the network prior.
    pub lambda2: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lambda0: 0.1,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

/// One sparse visual-odometry observation: pixel position and metric depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Sparse VO depth observations for one frame, at most one per pixel
/// (duplicates resolved toward the nearest depth).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseDepthMap {
    points: Vec<VoPoint>,
}

impl SparseDepthMap {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build from raw observations, keeping the nearest depth where several
    /// points fall on the same integer pixel.
    pub fn from_points(points: Vec<VoPoint>) -> Self {
        let mut best: std::collections::BTreeMap<(u64, u64), VoPoint> =
            std::collections::BTreeMap::new();
        for p in points {
            debug_assert!(p.depth > 0.0, "VO depth must be positive");
            let key = (p.v.floor() as u64, p.u.floor() as u64);
            best.entry(key)
                .and_modify(|q| {
                    if p.depth < q.depth {
                        *q = p;
                    }
                })
                .or_insert(p);
        }
        Self {
            points: best.into_values().collect(),
        }
    }

    #[inline]
    pub fn points(&self) -> &[VoPoint] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-segment quantities feeding the outer optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSummary {
    /// Mean log-depth of the segment under the network prediction.
    pub lg0: f64,
    /// VO-aligned target `lg0 + log v`, present iff the segment has VO.
    pub lg_tar: Option<f64>,
    /// Number of VO points inside the segment.
    pub vo_count: usize,
}

impl SegmentSummary {
    #[inline]
    pub fn has_vo(&self) -> bool {
        self.lg_tar.is_some()
    }
}

/// Natural log of a strictly positive depth map.
pub fn log_depth(depth: &DepthMap) -> Grid<f64> {
    depth.map(|&d| {
        debug_assert!(d > 0.0, "log_depth needs positive depth");
        d.ln()
    })
}

/// Closed-form inner optimum: the log-scale minimizing
/// `½ Σ (lg_net_i + log v - lg_vo_i)²` is `log v = mean(lg_vo - lg_net)`.
pub fn inner_scale(lg_net_at_vo: &[f64], lg_vo: &[f64]) -> Result<f64, FusionError> {
    assert_eq!(lg_net_at_vo.len(), lg_vo.len());
    if lg_vo.is_empty() {
        return Err(FusionError::NoVoPoints);
    }
    let sum: f64 = lg_vo
        .iter()
        .zip(lg_net_at_vo)
        .map(|(vo, net)| vo - net)
        .sum();
    Ok(sum / lg_vo.len() as f64)
}

/// Per-segment mean log-depth and VO-aligned target.
///
/// `labels` assigns each pixel to a segment id `< n_segments`; VO points
/// belong to the segment of their containing pixel. Points outside the image
/// are ignored.
pub fn summarize_segments(
    labels: &Grid<u32>,
    n_segments: usize,
    lg_net: &Grid<f64>,
    vo: &SparseDepthMap,
) -> Vec<SegmentSummary> {
    debug_assert!(labels.same_size(lg_net));
    let mut sum = vec![0.0f64; n_segments];
    let mut count = vec![0usize; n_segments];
    for (&l, &v) in labels.data().iter().zip(lg_net.data()) {
        sum[l as usize] += v;
        count[l as usize] += 1;
    }
    let mut vo_sum = vec![0.0f64; n_segments];
    let mut vo_count = vec![0usize; n_segments];
    for p in vo.points() {
        let (x, y) = (p.u.floor(), p.v.floor());
        if x < 0.0 || y < 0.0 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        if x >= labels.width() || y >= labels.height() {
            continue;
        }
        let k = *labels.at(x, y) as usize;
        vo_sum[k] += p.depth.ln() - *lg_net.at(x, y);
        vo_count[k] += 1;
    }
    (0..n_segments)
        .map(|k| {
            let lg0 = if count[k] > 0 {
                sum[k] / count[k] as f64
            } else {
                0.0
            };
            let lg_tar = (vo_count[k] > 0).then(|| lg0 + vo_sum[k] / vo_count[k] as f64);
            SegmentSummary {
                lg0,
                lg_tar,
                vo_count: vo_count[k],
            }
        })
        .collect()
}

fn system_diag_b(summaries: &[SegmentSummary], w: &FusionWeights) -> (Vec<f64>, Vec<f64>, f64) {
    let n = summaries.len() as f64;
    let s0: f64 = summaries.iter().map(|s| s.lg0).sum();
    let mut diag = Vec::with_capacity(summaries.len());
    let mut b = Vec::with_capacity(summaries.len());
    for s in summaries {
        let l1 = if s.has_vo() { w.lambda1 } else { 0.0 };
        diag.push(n * w.lambda0 + l1 + w.lambda2);
        b.push(
            w.lambda2 * s.lg0
                + l1 * s.lg_tar.unwrap_or(0.0)
                + w.lambda0 * (n * s.lg0 - s0),
        );
    }
    (diag, b, s0)
}

/// Solve the outer KKT system `A·lg = B` in O(N) via Sherman–Morrison on
/// `A = diag(N·λ₀ + λ₁ᵏ + λ₂) - λ₀·𝟙𝟙ᵀ`.
///
/// When no segment has VO points the prior is the unique optimum (or, for
/// `λ₂ = 0`, the gauge-fixed one), so `lg = lg0` is returned exactly.
pub fn solve_outer(
    summaries: &[SegmentSummary],
    w: &FusionWeights,
) -> Result<Vec<f64>, FusionError> {
    if summaries.is_empty() {
        return Err(FusionError::NoSegments);
    }
    if summaries.iter().all(|s| !s.has_vo()) {
        return Ok(summaries.iter().map(|s| s.lg0).collect());
    }
    let (diag, b, _) = system_diag_b(summaries, w);
    if diag.iter().any(|&d| d < 1e-12) {
        return Err(FusionError::SingularSystem);
    }
    let inv_diag_sum: f64 = diag.iter().map(|&d| 1.0 / d).sum();
    let denom = 1.0 - w.lambda0 * inv_diag_sum;
    if denom.abs() < 1e-12 {
        return Err(FusionError::SingularSystem);
    }
    let weighted_b: f64 = b.iter().zip(&diag).map(|(&bi, &di)| bi / di).sum();
    let correction = w.lambda0 * weighted_b / denom;
    Ok(b.iter()
        .zip(&diag)
        .map(|(&bi, &di)| (bi + correction) / di)
        .collect())
}

/// Dense reference solve of the same KKT system (O(N³) LU), used to
/// cross-check the Sherman–Morrison fast path.
pub fn solve_outer_dense(
    summaries: &[SegmentSummary],
    w: &FusionWeights,
) -> Result<Vec<f64>, FusionError> {
    if summaries.is_empty() {
        return Err(FusionError::NoSegments);
    }
    let n = summaries.len();
    let (diag, b, _) = system_diag_b(summaries, w);
    let mut a = nalgebra::DMatrix::from_element(n, n, -w.lambda0);
    for k in 0..n {
        a[(k, k)] = diag[k] - w.lambda0;
    }
    let rhs = nalgebra::DVector::from_vec(b);
    let solution = a.lu().solve(&rhs).ok_or(FusionError::SingularSystem)?;
    Ok(solution.iter().copied().collect())
}

/// ∞-norm KKT residual `‖A·lg - B‖ / ‖B‖` of a candidate outer solution.
pub fn outer_kkt_residual(summaries: &[SegmentSummary], w: &FusionWeights, lg: &[f64]) -> f64 {
    assert_eq!(lg.len(), summaries.len());
    let (diag, b, _) = system_diag_b(summaries, w);
    let lg_sum: f64 = lg.iter().sum();
    let mut max_res = 0.0f64;
    let mut max_b = 0.0f64;
    for k in 0..lg.len() {
        // A·lg = diag∘lg - λ₀·Σlg (A_kk already folds +λ₀ into the diagonal).
        let row = diag[k] * lg[k] - w.lambda0 * lg_sum;
        max_res = max_res.max((row - b[k]).abs());
        max_b = max_b.max(b[k].abs());
    }
    if max_b > 0.0 {
        max_res / max_b
    } else {
        max_res
    }
}

/// Outer objective: consistency over segment pairs (each unordered pair
/// counted once, matching the KKT system), VO targets, and the prior.
pub fn outer_objective(summaries: &[SegmentSummary], w: &FusionWeights, lg: &[f64]) -> f64 {
    assert_eq!(lg.len(), summaries.len());
    let mut obj = 0.0;
    for (k, sk) in summaries.iter().enumerate() {
        for (j, sj) in summaries.iter().enumerate().skip(k + 1) {
            let r = (lg[k] - lg[j]) - (sk.lg0 - sj.lg0);
            obj += w.lambda0 * r * r;
        }
        if let Some(t) = sk.lg_tar {
            obj += w.lambda1 * (t - lg[k]) * (t - lg[k]);
        }
        let p = lg[k] - sk.lg0;
        obj += w.lambda2 * p * p;
    }
    obj
}

/// Shift every pixel of segment `k` by `lg[k] - lg0[k]` in log space, i.e.
/// scale its depth by `exp(lg[k] - lg0[k])`. Within-segment depth ratios are
/// preserved exactly and the segment mean of the output equals `lg[k]`.
pub fn apply_segment_correction(
    lg_net: &Grid<f64>,
    labels: &Grid<u32>,
    lg: &[f64],
    lg0: &[f64],
) -> Grid<f64> {
    assert_eq!(lg.len(), lg0.len());
    let shift: Vec<f64> = lg.iter().zip(lg0).map(|(a, b)| a - b).collect();
    let w = lg_net.width();
    let mut out = lg_net.clone();
    out.data_mut()
        .par_chunks_mut(w)
        .zip(labels.data().par_chunks(w))
        .for_each(|(row, label_row)| {
            for (v, &l) in row.iter_mut().zip(label_row) {
                *v += shift[l as usize];
            }
        });
    out
}

/// Pixel-level objective with pairwise consistency over all ordered pixel
/// pairs and squared VO residuals at VO pixels. This is the function
/// [`pixelwise_oracle`] minimizes; quadratic cost in the pixel count.
pub fn pixel_objective(
    lg_out: &Grid<f64>,
    lg_net: &Grid<f64>,
    vo: &SparseDepthMap,
    w: &FusionWeights,
) -> f64 {
    let x = lg_out.data();
    let r = lg_net.data();
    let n = x.len();
    let mut obj = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = (x[i] - x[j]) - (r[i] - r[j]);
            obj += w.lambda0 * d * d;
        }
    }
    for p in vo.points() {
        let (px, py) = (p.u.floor() as usize, p.v.floor() as usize);
        if px >= lg_out.width() || py >= lg_out.height() {
            continue;
        }
        let res = p.depth.ln() - *lg_out.at(px, py);
        obj += w.lambda1 * res * res;
    }
    obj
}

/// Reference pixel-level fusion: minimize [`pixel_objective`] directly by
/// conjugate gradient on its normal equations. Only for tiny images
/// (`H·W <= ORACLE_PIXEL_CAP`).
///
/// Without VO points the objective is invariant to a uniform log-shift; the
/// gauge is fixed by anchoring to the network prediction, so the input is
/// returned unchanged.
pub fn pixelwise_oracle(
    lg_net: &Grid<f64>,
    vo: &SparseDepthMap,
    w: &FusionWeights,
) -> Result<Grid<f64>, FusionError> {
    let n = lg_net.len();
    if n > ORACLE_PIXEL_CAP {
        return Err(FusionError::TooLarge {
            pixels: n,
            cap: ORACLE_PIXEL_CAP,
        });
    }

    // Per-pixel VO weight and target.
    let mut l1 = vec![0.0f64; n];
    let mut target = vec![0.0f64; n];
    let mut any_vo = false;
    for p in vo.points() {
        let (px, py) = (p.u.floor() as usize, p.v.floor() as usize);
        if px >= lg_net.width() || py >= lg_net.height() {
            continue;
        }
        let i = py * lg_net.width() + px;
        l1[i] = w.lambda1;
        target[i] = p.depth.ln();
        any_vo = true;
    }
    if !any_vo || w.lambda1 == 0.0 {
        return Ok(lg_net.clone());
    }

    // Normal equations of the quadratic:
    //   M x = 4λ₀ (n·x - Σx·𝟙) + 2·l1∘x,   b = 4λ₀ (n·r - Σr·𝟙) + 2·l1∘t.
    let r = lg_net.data();
    let nf = n as f64;
    let matvec = |x: &[f64], out: &mut [f64]| {
        let sum: f64 = x.iter().sum();
        for i in 0..n {
            out[i] = 4.0 * w.lambda0 * (nf * x[i] - sum) + 2.0 * l1[i] * x[i];
        }
    };
    let r_sum: f64 = r.iter().sum();
    let b: Vec<f64> = (0..n)
        .map(|i| 4.0 * w.lambda0 * (nf * r[i] - r_sum) + 2.0 * l1[i] * target[i])
        .collect();

    // Conjugate gradient from the network prediction.
    let mut x: Vec<f64> = r.to_vec();
    let mut ax = vec![0.0; n];
    matvec(&x, &mut ax);
    let mut res: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = res.clone();
    let mut rs_old: f64 = res.iter().map(|v| v * v).sum();
    let b_norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut ap = vec![0.0; n];
    for _ in 0..(10 * n.max(50)) {
        if rs_old.sqrt() / b_norm < 1e-13 {
            break;
        }
        matvec(&p, &mut ap);
        let p_ap: f64 = p.iter().zip(&ap).map(|(a, c)| a * c).sum();
        if p_ap <= 0.0 {
            break;
        }
        let alpha = rs_old / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            res[i] -= alpha * ap[i];
        }
        let rs_new: f64 = res.iter().map(|v| v * v).sum();
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = res[i] + beta * p[i];
        }
        rs_old = rs_new;
    }

    Ok(Grid::from_vec(lg_net.width(), lg_net.height(), x))
}

/// Full fusion output.
#[derive(Debug, Clone)]
pub struct FusionResult {
    /// Fused metric depth, clamped to the configured range.
    pub depth: DepthMap,
    /// Fused log-depth before clamping.
    pub log_depth: Grid<f64>,
    pub segmentation: Segmentation,
    pub summaries: Vec<SegmentSummary>,
    /// Optimized per-segment log-depth (outer solution).
    pub segment_log_depth: Vec<f64>,
}

/// Fuse with a precomputed segmentation: summarize, solve the outer system,
/// apply the per-segment correction, exponentiate and clamp.
pub fn fuse_with_segmentation(
    segmentation: &Segmentation,
    lg_net: &Grid<f64>,
    vo: &SparseDepthMap,
    w: &FusionWeights,
    depth_range: (f64, f64),
) -> Result<(DepthMap, Vec<SegmentSummary>, Vec<f64>), FusionError> {
    let summaries = summarize_segments(segmentation.labels(), segmentation.n_clusters(), lg_net, vo);
    let lg = solve_outer(&summaries, w)?;
    let lg0: Vec<f64> = summaries.iter().map(|s| s.lg0).collect();
    let fused_lg = apply_segment_correction(lg_net, segmentation.labels(), &lg, &lg0);
    let depth = fused_lg.map(|&v| v.exp().clamp(depth_range.0, depth_range.1));
    Ok((depth, summaries, lg))
}

/// End-to-end fusion: segment the image with depth-augmented SLIC, then run
/// the nested optimization. With empty VO the output equals the network
/// depth (prior-only solution).
pub fn fuse(
    image: &Image,
    lg_net: &Grid<f64>,
    vo: &SparseDepthMap,
    slic_params: &SlicParams,
    w: &FusionWeights,
    depth_range: (f64, f64),
) -> Result<FusionResult, FusionError> {
    let lab = rgb_to_lab(image);
    let net_depth = lg_net.map(|&v| v.exp());
    let segmentation = segment(&lab, &net_depth, slic_params)?;
    let (depth, summaries, lg) =
        fuse_with_segmentation(&segmentation, lg_net, vo, w, depth_range)?;
    let lg0: Vec<f64> = summaries.iter().map(|s| s.lg0).collect();
    let log_depth = apply_segment_correction(lg_net, segmentation.labels(), &lg, &lg0);
    Ok(FusionResult {
        depth,
        log_depth,
        segmentation,
        summaries,
        segment_log_depth: lg,
    })
}
