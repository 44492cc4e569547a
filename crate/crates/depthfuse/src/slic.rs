//! Depth-augmented SLIC superpixel segmentation.
//!
//! A K-means-style clustering over per-pixel features
//! `(LAB color, image coordinates, depth)` with the distance
//!
//! ```text
//! L(a, b) = λ_lab · ‖lab_a - lab_b‖₂ + λ_d · |d_a - d_b| + λ_pix · ‖xy_a - xy_b‖₂
//! ```
//!
//! Cluster centers start on a regular grid with step `s` and alternate
//! between assignment (each pixel to the nearest center) and update (each
//! center to the mean of its members). The depth term lets segments follow
//! geometric units instead of color regions alone, which is what the
//! downstream fusion step assumes.
//!
//! Assignment searches centers within a `2s` Chebyshev window by default
//! (classic SLIC complexity); `exhaustive = true` searches every center.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{DepthMap, Grid, Image};

#[derive(Debug, Error)]
pub enum SlicError {
    #[error("grid step {step} exceeds the image size {width}x{height}")]
    ImageTooSmall {
        step: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per-pixel clustering feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFeature {
    pub lab: [f64; 3],
    pub xy: [f64; 2],
    pub depth: f64,
}

/// Segmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    /// Grid step `s` in pixels between initial cluster centers.
    pub step: usize,
    pub lambda_lab: f64,
    pub lambda_d: f64,
    pub lambda_pix: f64,
    /// Number of assign/update iterations `E`.
    pub max_iter: usize,
    /// Search every center instead of the `2s` window.
    pub exhaustive: bool,
}

impl SlicParams {
    /// Defaults for a given grid step: `λ_lab = 1/10`, `λ_d = 1/5` per meter,
    /// `λ_pix = 1/s`, ten iterations, windowed search.
    pub fn with_step(step: usize) -> Self {
        Self {
            step,
            lambda_lab: 0.1,
            lambda_d: 0.2,
            lambda_pix: 1.0 / step as f64,
            max_iter: 10,
            exhaustive: false,
        }
    }

    fn validate(&self) -> Result<(), SlicError> {
        if self.step < 2 {
            return Err(SlicError::InvalidParams(format!("step {} < 2", self.step)));
        }
        if self.max_iter < 1 {
            return Err(SlicError::InvalidParams("max_iter must be >= 1".into()));
        }
        let weights = [self.lambda_lab, self.lambda_d, self.lambda_pix];
        if weights.iter().any(|&w| w < 0.0) || weights.iter().all(|&w| w == 0.0) {
            return Err(SlicError::InvalidParams(format!(
                "weights must be nonnegative and not all zero, got {weights:?}"
            )));
        }
        Ok(())
    }
}

impl Default for SlicParams {
    fn default() -> Self {
        Self::with_step(16)
    }
}

/// One cluster of the final segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    /// Mean feature of the members.
    pub center: PixelFeature,
    pub count: usize,
}

/// Segmentation result: a per-pixel cluster id map plus per-cluster stats.
#[derive(Debug, Clone)]
pub struct Segmentation {
    labels: Grid<u32>,
    clusters: Vec<ClusterStats>,
    objective_per_iter: Vec<f64>,
}

impl Segmentation {
    #[inline]
    pub fn labels(&self) -> &Grid<u32> {
        &self.labels
    }

    #[inline]
    pub fn clusters(&self) -> &[ClusterStats] {
        &self.clusters
    }

    #[inline]
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Total within-cluster cost recorded after each assignment step.
    #[inline]
    pub fn objective_per_iter(&self) -> &[f64] {
        &self.objective_per_iter
    }
}

/// Weighted feature distance of the segmentation.
#[inline]
pub fn slic_distance(a: &PixelFeature, b: &PixelFeature, p: &SlicParams) -> f64 {
    let dl = a.lab[0] - b.lab[0];
    let da = a.lab[1] - b.lab[1];
    let db = a.lab[2] - b.lab[2];
    let dx = a.xy[0] - b.xy[0];
    let dy = a.xy[1] - b.xy[1];
    p.lambda_lab * (dl * dl + da * da + db * db).sqrt()
        + p.lambda_d * (a.depth - b.depth).abs()
        + p.lambda_pix * (dx * dx + dy * dy).sqrt()
}

#[inline]
fn feature_at(lab: &Image, depth: &DepthMap, x: usize, y: usize) -> PixelFeature {
    let px = lab.pixel(x, y);
    PixelFeature {
        lab: [px[0], px[1], px[2]],
        xy: [x as f64, y as f64],
        depth: *depth.at(x, y),
    }
}

/// Initial centers on a regular grid with the given step; feature values are
/// sampled at the nearest pixel, coordinates sit at the tile centroid.
pub fn init_centers(lab: &Image, depth: &DepthMap, step: usize) -> Vec<PixelFeature> {
    let (w, h) = (lab.width(), lab.height());
    let nx = (w / step).max(1);
    let ny = (h / step).max(1);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = i as f64 * step as f64 + (step - 1) as f64 / 2.0;
            let cy = j as f64 * step as f64 + (step - 1) as f64 / 2.0;
            let px = (cx.round() as usize).min(w - 1);
            let py = (cy.round() as usize).min(h - 1);
            let mut f = feature_at(lab, depth, px, py);
            f.xy = [cx, cy];
            centers.push(f);
        }
    }
    centers
}

/// Assign every pixel to its nearest center (ties to the lowest center
/// index); returns the label map and the summed assignment cost.
pub fn assign_pixels(
    lab: &Image,
    depth: &DepthMap,
    centers: &[PixelFeature],
    p: &SlicParams,
) -> (Grid<u32>, f64) {
    assign_pixels_impl(lab, depth, centers, p, None)
}

fn assign_pixels_impl(
    lab: &Image,
    depth: &DepthMap,
    centers: &[PixelFeature],
    p: &SlicParams,
    previous: Option<&Grid<u32>>,
) -> (Grid<u32>, f64) {
    let (w, h) = (lab.width(), lab.height());
    let window = 2.0 * p.step as f64;

    // Bucket centers by coarse cell so the windowed search is O(1) per pixel.
    let cell = p.step;
    let bw = w.div_ceil(cell);
    let bh = h.div_ceil(cell);
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); bw * bh];
    if !p.exhaustive {
        for (idx, c) in centers.iter().enumerate() {
            let bx = ((c.xy[0].max(0.0) as usize) / cell).min(bw - 1);
            let by = ((c.xy[1].max(0.0) as usize) / cell).min(bh - 1);
            buckets[by * bw + bx].push(idx as u32);
        }
    }

    let mut labels = Grid::filled(w, h, 0u32);
    let row_costs: Vec<f64> = labels
        .data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .map(|(y, row)| {
            let mut cost_sum = 0.0;
            for (x, out) in row.iter_mut().enumerate() {
                let f = feature_at(lab, depth, x, y);
                let mut best = f64::INFINITY;
                let mut best_idx = u32::MAX;
                let mut consider = |idx: u32| {
                    let c = &centers[idx as usize];
                    if !p.exhaustive {
                        let inside = (c.xy[0] - f.xy[0]).abs() <= window
                            && (c.xy[1] - f.xy[1]).abs() <= window;
                        if !inside && previous.map_or(true, |l| *l.at(x, y) != idx) {
                            return;
                        }
                    }
                    let d = slic_distance(&f, c, p);
                    if d < best || (d == best && idx < best_idx) {
                        best = d;
                        best_idx = idx;
                    }
                };
                if p.exhaustive {
                    for idx in 0..centers.len() as u32 {
                        consider(idx);
                    }
                } else {
                    let pcx = (x / cell) as isize;
                    let pcy = (y / cell) as isize;
                    for by in (pcy - 2).max(0)..=(pcy + 2).min(bh as isize - 1) {
                        for bx in (pcx - 2).max(0)..=(pcx + 2).min(bw as isize - 1) {
                            for &idx in &buckets[by as usize * bw + bx as usize] {
                                consider(idx);
                            }
                        }
                    }
                    if let Some(prev) = previous {
                        consider(*prev.at(x, y));
                    }
                    if best_idx == u32::MAX {
                        // Window found nothing (centers drifted away); fall
                        // back to a full scan for this pixel.
                        for (idx, c) in centers.iter().enumerate() {
                            let d = slic_distance(&f, c, p);
                            if d < best || (d == best && (idx as u32) < best_idx) {
                                best = d;
                                best_idx = idx as u32;
                            }
                        }
                    }
                }
                *out = best_idx;
                cost_sum += best;
            }
            cost_sum
        })
        .collect();

    (labels, row_costs.iter().sum())
}

/// Mean feature and member count per cluster id (clusters may be empty).
pub fn update_centers(
    lab: &Image,
    depth: &DepthMap,
    labels: &Grid<u32>,
    n_clusters: usize,
) -> Vec<(PixelFeature, usize)> {
    let mut sums = vec![([0.0f64; 6], 0usize); n_clusters];
    for ((x, y), &l) in labels.enumerate() {
        let f = feature_at(lab, depth, x, y);
        let (acc, count) = &mut sums[l as usize];
        acc[0] += f.lab[0];
        acc[1] += f.lab[1];
        acc[2] += f.lab[2];
        acc[3] += f.xy[0];
        acc[4] += f.xy[1];
        acc[5] += f.depth;
        *count += 1;
    }
    sums.into_iter()
        .map(|(acc, count)| {
            let n = count.max(1) as f64;
            (
                PixelFeature {
                    lab: [acc[0] / n, acc[1] / n, acc[2] / n],
                    xy: [acc[3] / n, acc[4] / n],
                    depth: acc[5] / n,
                },
                count,
            )
        })
        .collect()
}

/// Run the full segmentation: grid initialization, then `max_iter` rounds of
/// assignment and mean update. Empty clusters are removed and ids compacted.
pub fn segment(lab: &Image, depth: &DepthMap, p: &SlicParams) -> Result<Segmentation, SlicError> {
    p.validate()?;
    if lab.channels() != 3 {
        return Err(SlicError::InvalidParams(format!(
            "lab image must have 3 channels, got {}",
            lab.channels()
        )));
    }
    if lab.width() != depth.width() || lab.height() != depth.height() {
        return Err(SlicError::ShapeMismatch(format!(
            "lab {}x{} vs depth {}x{}",
            lab.width(),
            lab.height(),
            depth.width(),
            depth.height()
        )));
    }
    if p.step > lab.width().min(lab.height()) {
        return Err(SlicError::ImageTooSmall {
            step: p.step,
            width: lab.width(),
            height: lab.height(),
        });
    }

    let mut centers = init_centers(lab, depth, p.step);
    let mut labels = Grid::filled(lab.width(), lab.height(), 0u32);
    let mut counts = vec![0usize; centers.len()];
    let mut objective_per_iter = Vec::with_capacity(p.max_iter);

    for iter in 0..p.max_iter {
        let previous = (iter > 0).then_some(&labels);
        let (new_labels, cost) = assign_pixels_impl(lab, depth, &centers, p, previous);
        labels = new_labels;
        objective_per_iter.push(cost);

        let stats = update_centers(lab, depth, &labels, centers.len());
        if stats.iter().any(|&(_, count)| count == 0) {
            // Compact ids, dropping empty clusters in stable order.
            let mut remap = vec![u32::MAX; stats.len()];
            let mut kept = Vec::with_capacity(stats.len());
            for (old, (center, count)) in stats.into_iter().enumerate() {
                if count > 0 {
                    remap[old] = kept.len() as u32;
                    kept.push((center, count));
                }
            }
            for l in labels.data_mut() {
                *l = remap[*l as usize];
            }
            centers = kept.iter().map(|&(c, _)| c).collect();
            counts = kept.iter().map(|&(_, n)| n).collect();
        } else {
            centers = stats.iter().map(|&(c, _)| c).collect();
            counts = stats.iter().map(|&(_, n)| n).collect();
        }
    }

    let clusters = centers
        .into_iter()
        .zip(counts)
        .map(|(center, count)| ClusterStats { center, count })
        .collect();
    Ok(Segmentation {
        labels,
        clusters,
        objective_per_iter,
    })
}

// ── CIELAB conversion ────────────────────────────────────────────────────────

const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Convert an sRGB image in `[0, 1]` to CIE LAB under the D65 white point.
pub fn rgb_to_lab(image: &Image) -> Image {
    assert_eq!(image.channels(), 3, "rgb_to_lab expects a 3-channel image");
    let (w, h) = (image.width(), image.height());
    let mut out = Image::zeros(w, h, 3);
    out.data_mut()
        .par_chunks_mut(w * 3)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let p = image.pixel(x, y);
                let r = srgb_to_linear(p[0]);
                let g = srgb_to_linear(p[1]);
                let b = srgb_to_linear(p[2]);
                let xn = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / D65_WHITE[0];
                let yn = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b) / D65_WHITE[1];
                let zn = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / D65_WHITE[2];
                let fx = lab_f(xn);
                let fy = lab_f(yn);
                let fz = lab_f(zn);
                row[x * 3] = 116.0 * fy - 16.0;
                row[x * 3 + 1] = 500.0 * (fx - fy);
                row[x * 3 + 2] = 200.0 * (fy - fz);
            }
        });
    out
}
