//! Two-view pinhole geometry shared by every other module.
//!
//! Conventions:
//! - pixel coordinates: `u` rightward, `v` downward, origin at the top-left
//!   pixel center;
//! - a [`RelativePose`] `(R, t)` maps camera-frame points of the base frame
//!   into the source frame, `X_src = R · X_base + t`;
//! - the fundamental matrix satisfies the two-view constraint
//!   `p_src^T · F · p_base = 0` for static points, with
//!   `F = K^-T · [t]_x · R · K^-1`.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{DepthMap, Grid, Image, Mask};

/// Rotation orthonormality tolerance for [`RelativePose`] construction.
pub const ROTATION_DRIFT_TOL: f64 = 1e-9;

/// Minimum baseline norm below which the fundamental matrix is undefined.
pub const MIN_BASELINE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not a rotation (drift {0:.3e})")]
    NotARotation(f64),
    #[error("zero baseline: fundamental matrix undefined for pure rotation")]
    ZeroBaseline,
    #[error("degenerate epipolar line (direction coefficients vanish)")]
    DegenerateLine,
    #[error("matrix is not rank-deficient like a fundamental matrix")]
    NotRankTwo,
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Back-project pixel `(u, v)` at `depth` meters into the camera frame.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Project a camera-frame point; `None` when it lies at or behind the
    /// image plane.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 1e-12 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// SE(3) transform between two camera frames.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RelativePose {
    /// Build a pose, rejecting rotation matrices that drift from
    /// orthonormality (or have negative determinant) by more than
    /// [`ROTATION_DRIFT_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let drift = rotation_drift(&rotation);
        if drift > ROTATION_DRIFT_TOL {
            return Err(GeometryError::NotARotation(drift));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Build a pose from a possibly noisy rotation: drift below `max_drift`
    /// is repaired by projecting onto the nearest rotation (SVD), anything
    /// larger is rejected.
    pub fn new_reorthonormalized(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        max_drift: f64,
    ) -> Result<Self, GeometryError> {
        let drift = rotation_drift(&rotation);
        if drift <= ROTATION_DRIFT_TOL {
            return Ok(Self {
                rotation,
                translation,
            });
        }
        if drift > max_drift {
            return Err(GeometryError::NotARotation(drift));
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // Flip the axis of least significance to land on SO(3).
            let mut u_fixed = u;
            u_fixed.column_mut(2).neg_mut();
            r = u_fixed * v_t;
        }
        Self::new(r, translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Apply the transform: `R · x + t`.
    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_t = self.rotation.transpose();
        Self {
            rotation: r_t,
            translation: -(r_t * self.translation),
        }
    }

    /// Matrix-style composition: `(self ∘ rhs)(x) = self(rhs(x))`.
    pub fn compose(&self, rhs: &Self) -> Self {
        Self {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let gram = r * r.transpose() - Matrix3::identity();
    let ortho_drift = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let det_drift = (r.determinant() - 1.0).abs();
    ortho_drift.max(det_drift)
}

/// Two-view fundamental matrix, defined up to scale (rank 2).
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Wrap an externally produced matrix, checking the rank-2 invariant
    /// (smallest singular value below `1e-8 ×` the largest).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let sv = m.singular_values();
        if sv[2] > 1e-8 * sv[0] {
            return Err(GeometryError::NotRankTwo);
        }
        Ok(Self(m))
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Homogeneous image line `L0·x + L1·y + L2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine(pub Vector3<f64>);

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Fundamental matrix from calibration and relative pose,
/// `F = K^-T · [t]_x · R · K^-1`, normalized to unit max element.
pub fn fundamental_from_pose(
    k: &CameraIntrinsics,
    pose: &RelativePose,
) -> Result<FundamentalMatrix, GeometryError> {
    if pose.translation().norm() < MIN_BASELINE {
        return Err(GeometryError::ZeroBaseline);
    }
    let k_inv = k.inverse_matrix();
    let f = k_inv.transpose() * skew(pose.translation()) * pose.rotation() * k_inv;
    let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(FundamentalMatrix(f / scale))
}

/// Epipolar line of base-frame pixel `p` in the source frame: `L = F · [p, 1]`.
pub fn epipolar_line(f: &FundamentalMatrix, p: (f64, f64)) -> EpipolarLine {
    EpipolarLine(f.matrix() * Vector3::new(p.0, p.1, 1.0))
}

/// Perpendicular pixel distance from `q` to the line.
pub fn point_line_distance(line: &EpipolarLine, q: (f64, f64)) -> Result<f64, GeometryError> {
    let l = line.0;
    let dir_sq = l.x * l.x + l.y * l.y;
    if dir_sq < 1e-20 {
        return Err(GeometryError::DegenerateLine);
    }
    Ok((l.x * q.0 + l.y * q.1 + l.z).abs() / dir_sq.sqrt())
}

/// Reconstruct the base frame by warping `source` through `depth` and `pose`.
///
/// Per pixel: back-project with the base-frame depth, transform by `pose`,
/// project into the source camera, bilinear-sample. A pixel is invalid when
/// its depth is non-positive, the transformed point falls behind the source
/// camera, or sampling would clamp at the source border.
pub fn warp_depth_to_source(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    pose: &RelativePose,
    source: &Image,
) -> (Image, Mask) {
    let (w, h, c) = (depth.width(), depth.height(), source.channels());
    let mut out = Image::zeros(w, h, c);
    let mut valid = Grid::filled(w, h, false);

    out.data_mut()
        .par_chunks_mut(w * c)
        .zip(valid.data_mut().par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, valid_row))| {
            let mut sample = vec![0.0; c];
            for x in 0..w {
                let d = *depth.at(x, y);
                if !(d > 0.0) {
                    continue;
                }
                let p = k.back_project(x as f64, y as f64, d);
                let q = pose.transform(&p);
                let Some((u, v)) = k.project(&q) else {
                    continue;
                };
                let in_bounds = source.sample_bilinear(u, v, &mut sample);
                if in_bounds {
                    row[x * c..(x + 1) * c].copy_from_slice(&sample);
                    valid_row[x] = true;
                }
            }
        });

    (out, valid)
}

/// Conjugate a pose by the horizontal mirror `M = diag(-1, 1, 1)`:
/// `R' = M·R·M`, `t' = M·t`. Matches poses to horizontally flipped images.
pub fn flip_pose_horizontal(pose: &RelativePose) -> RelativePose {
    let r = pose.rotation();
    let flipped = Matrix3::new(
        r[(0, 0)],
        -r[(0, 1)],
        -r[(0, 2)],
        -r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        -r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
    );
    let t = pose.translation();
    RelativePose {
        rotation: flipped,
        translation: Vector3::new(-t.x, t.y, t.z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_k() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 100, 100).unwrap()
    }

    fn realistic_k() -> CameraIntrinsics {
        CameraIntrinsics::new(320.0, 300.0, 319.5, 95.5, 640, 192).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng, scale: f64) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-scale..scale);
        nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle,
        )
        .into_inner()
    }

    fn random_pose(rng: &mut impl Rng) -> RelativePose {
        RelativePose::new(
            random_rotation(rng, 0.3),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
            ),
        )
        .unwrap()
    }

    #[test]
    fn pure_x_translation_gives_horizontal_lines() {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let f = fundamental_from_pose(&unit_k(), &pose).unwrap();
        // F proportional to [[0,0,0],[0,0,-1],[0,1,0]].
        let m = f.matrix();
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let scale = m[(2, 1)] / expected[(2, 1)];
        assert_relative_eq!(m / scale, expected, epsilon = 1e-12);

        // The epipolar line of (5, 7) is y = 7.
        let line = epipolar_line(&f, (5.0, 7.0));
        assert_relative_eq!(point_line_distance(&line, (3.0, 7.0)).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(point_line_distance(&line, (3.0, 9.0)).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_baseline_is_rejected() {
        let pose = RelativePose::identity();
        assert!(matches!(
            fundamental_from_pose(&unit_k(), &pose),
            Err(GeometryError::ZeroBaseline)
        ));
    }

    #[test]
    fn epipolar_constraint_on_synthetic_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = realistic_k();
        for _ in 0..10 {
            let pose = random_pose(&mut rng);
            let f = fundamental_from_pose(&k, &pose).unwrap();
            for _ in 0..20 {
                let x = Vector3::new(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(4.0..30.0),
                );
                let (u0, v0) = k.project(&x).unwrap();
                let (u1, v1) = k.project(&pose.transform(&x)).unwrap();
                let p0 = Vector3::new(u0, v0, 1.0);
                let p1 = Vector3::new(u1, v1, 1.0);
                let residual = (p1.transpose() * f.matrix() * p0)[0].abs();
                // F is normalized to unit max element by construction.
                assert!(residual < 1e-9, "epipolar residual {residual}");
                // The correspondence lies on the epipolar line.
                let line = epipolar_line(&f, (u0, v0));
                assert!(point_line_distance(&line, (u1, v1)).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn epipolar_constraint_normalized_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = realistic_k();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let f = fundamental_from_pose(&k, &pose).unwrap();
            let x = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(4.0..30.0),
            );
            let (u0, v0) = k.project(&x).unwrap();
            let (u1, v1) = k.project(&pose.transform(&x)).unwrap();
            let p0 = Vector3::new(u0, v0, 1.0);
            let p1 = Vector3::new(u1, v1, 1.0);
            let res = (p1.transpose() * f.matrix() * p0)[0].abs();
            let denom = f.matrix().norm() * p0.norm() * p1.norm();
            assert!(res / denom < 1e-8, "normalized residual {}", res / denom);
        }
    }

    #[test]
    fn line_distance_examples() {
        let l = EpipolarLine(Vector3::new(3.0, 4.0, 0.0));
        assert_relative_eq!(point_line_distance(&l, (1.0, 1.0)).unwrap(), 7.0 / 5.0);
        let degenerate = EpipolarLine(Vector3::new(0.0, 0.0, 1.0));
        assert!(matches!(
            point_line_distance(&degenerate, (0.0, 0.0)),
            Err(GeometryError::DegenerateLine)
        ));
    }

    #[test]
    fn line_distance_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let l = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-20.0..20.0),
            );
            if l.x * l.x + l.y * l.y < 1e-6 {
                continue;
            }
            let q = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let s = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let d0 = point_line_distance(&EpipolarLine(l), q).unwrap();
            let d1 = point_line_distance(&EpipolarLine(l * s), q).unwrap();
            assert_relative_eq!(d0, d1, max_relative = 1e-12);
        }
    }

    #[test]
    fn scaled_fundamental_same_zero_set() {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let f = fundamental_from_pose(&unit_k(), &pose).unwrap();
        let f2 = FundamentalMatrix::from_matrix(f.matrix() * 2.0).unwrap();
        let line = epipolar_line(&f, (5.0, 7.0));
        let line2 = epipolar_line(&f2, (5.0, 7.0));
        for q in [(0.0, 7.0), (123.0, 7.0), (-4.0, 7.0)] {
            assert!(point_line_distance(&line, q).unwrap() < 1e-12);
            assert!(point_line_distance(&line2, q).unwrap() < 1e-12);
        }
    }

    #[test]
    fn warp_identity_pose_is_identity() {
        let k = CameraIntrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
        let source = Image::from_fn(8, 8, 3, |x, y, c| (x + 8 * y + c) as f64 / 100.0);
        let depth = DepthMap::filled(8, 8, 5.0);
        let (rec, valid) = warp_depth_to_source(&depth, &k, &RelativePose::identity(), &source);
        assert!(valid.data().iter().all(|&v| v));
        for (a, b) in rec.data().iter().zip(source.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_constant_plane_is_uniform_shift() {
        // fx * b / d = 10 * 2 / 4 = 5 pixels of disparity.
        let k = CameraIntrinsics::new(10.0, 10.0, 0.0, 0.0, 16, 4).unwrap();
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(2.0, 0.0, 0.0)).unwrap();
        let source = Image::from_fn(16, 4, 1, |x, y, _| (x * 31 + y * 7) as f64 / 97.0);
        let depth = DepthMap::filled(16, 4, 4.0);
        let (rec, valid) = warp_depth_to_source(&depth, &k, &pose, &source);
        for y in 0..4 {
            for x in 0..16 {
                if x + 5 < 16 {
                    assert!(*valid.at(x, y));
                    assert!((rec.pixel(x, y)[0] - source.pixel(x + 5, y)[0]).abs() < 1e-12);
                } else {
                    assert!(!*valid.at(x, y));
                }
            }
        }
    }

    #[test]
    fn warp_marks_points_behind_camera_invalid() {
        let k = CameraIntrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -10.0)).unwrap();
        let source = Image::zeros(8, 8, 1);
        let depth = DepthMap::filled(8, 8, 5.0);
        let (_, valid) = warp_depth_to_source(&depth, &k, &pose, &source);
        assert!(valid.data().iter().all(|&v| !v));
    }

    #[test]
    fn flip_pose_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let back = flip_pose_horizontal(&flip_pose_horizontal(&pose));
            for (a, b) in back.rotation().iter().zip(pose.rotation().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in back.translation().iter().zip(pose.translation().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flip_pose_mirrors_translation() {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 2.0)).unwrap();
        let flipped = flip_pose_horizontal(&pose);
        assert_eq!(*flipped.translation(), Vector3::new(-1.0, 0.0, 2.0));
    }

    #[test]
    fn flip_pose_commutes_with_image_flip() {
        // Mirror-symmetric principal point so the pixel flip x -> W-1-x
        // matches the camera-frame mirror exactly.
        let (w, h) = (33usize, 17usize);
        let k = CameraIntrinsics::new(40.0, 40.0, (w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, w, h)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rot = random_rotation(&mut rng, 0.05);
        let pose = RelativePose::new(rot, Vector3::new(0.2, 0.1, 0.05)).unwrap();
        let source = Image::from_fn(w, h, 3, |x, y, c| {
            (((x * 13 + y * 29 + c * 7) % 43) as f64) / 43.0
        });
        let depth = DepthMap::from_fn(w, h, |x, y| 5.0 + 0.01 * (x as f64) + 0.02 * (y as f64));

        let (warped, valid) = warp_depth_to_source(&depth, &k, &pose, &source);
        let (warped_flipped, valid_flipped) = warp_depth_to_source(
            &depth.flip_horizontal(),
            &k,
            &flip_pose_horizontal(&pose),
            &source.flip_horizontal(),
        );
        let expected = warped.flip_horizontal();
        let expected_valid = valid.flip_horizontal();

        let mut both = 0usize;
        let mut mask_mismatch = 0usize;
        for y in 0..h {
            for x in 0..w {
                if *expected_valid.at(x, y) != *valid_flipped.at(x, y) {
                    mask_mismatch += 1;
                    continue;
                }
                if *expected_valid.at(x, y) {
                    both += 1;
                    for c in 0..3 {
                        let d = (expected.pixel(x, y)[c] - warped_flipped.pixel(x, y)[c]).abs();
                        assert!(d < 1e-9, "color mismatch {d} at ({x},{y},{c})");
                    }
                }
            }
        }
        assert!(both > w * h / 2, "too few valid pixels to compare: {both}");
        assert!(mask_mismatch <= w * h / 100, "mask mismatch {mask_mismatch}");
    }

    #[test]
    fn reorthonormalization_repairs_small_drift() {
        let mut noisy = Matrix3::identity();
        noisy[(0, 1)] += 1e-5;
        let pose = RelativePose::new_reorthonormalized(noisy, Vector3::zeros(), 1e-3).unwrap();
        assert!(rotation_drift(pose.rotation()) <= ROTATION_DRIFT_TOL);

        let reflection = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(matches!(
            RelativePose::new_reorthonormalized(reflection, Vector3::zeros(), 1e-3),
            Err(GeometryError::NotARotation(_))
        ));
    }

    #[test]
    fn compose_and_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        let x = Vector3::new(0.3, -0.2, 4.0);
        let via_compose = a.compose(&b).transform(&x);
        let sequential = a.transform(&b.transform(&x));
        assert_relative_eq!(via_compose, sequential, epsilon = 1e-12);
        let round = a.inverse().transform(&a.transform(&x));
        assert_relative_eq!(round, x, epsilon = 1e-9);
    }
}
