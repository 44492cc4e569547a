//! Dynamic-object masking from optical flow and epipolar geometry.
//!
//! A static 3D point observed from two posed cameras must move along its
//! epipolar line in the image. Pixels whose optical-flow displacement strays
//! from that line are treated as dynamic and excluded from reconstruction
//! losses.

use rayon::prelude::*;

use crate::geometry::{epipolar_line, point_line_distance, FundamentalMatrix, GeometryError};
use crate::grid::{Grid, Mask};

/// H×W per-pixel displacement `(dx, dy)` in pixels from the base frame to
/// the source frame.
pub type FlowField = Grid<[f64; 2]>;

/// Deviation threshold in pixels above which a pixel counts as dynamic.
pub const DEFAULT_MASK_THRESHOLD: f64 = 10.0;

/// Per-pixel distance between the flow-displaced point `p + flow(p)` and the
/// epipolar line of `p`. Pixels whose epipolar line is degenerate (at the
/// epipole) get `+inf` so they are always masked as dynamic.
pub fn epipolar_deviation(flow: &FlowField, f: &FundamentalMatrix) -> Grid<f64> {
    let w = flow.width();
    let mut out = Grid::filled(w, flow.height(), 0.0);
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                let p = (x as f64, y as f64);
                let line = epipolar_line(f, p);
                let d = flow.at(x, y);
                let q = (p.0 + d[0], p.1 + d[1]);
                *v = match point_line_distance(&line, q) {
                    Ok(dist) => dist,
                    Err(GeometryError::DegenerateLine) => f64::INFINITY,
                    Err(_) => unreachable!("point_line_distance only degenerates"),
                };
            }
        });
    out
}

/// Threshold a deviation map into a static mask:
/// `true` (static, loss permitted) iff `deviation <= threshold`.
pub fn build_static_mask(deviation: &Grid<f64>, threshold: f64) -> Mask {
    assert!(threshold > 0.0, "mask threshold must be positive");
    deviation.map(|&d| d <= threshold)
}
