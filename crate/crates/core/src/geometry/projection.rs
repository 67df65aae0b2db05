//! Pinhole projection and dense rigid-motion correspondence.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};

use super::se3::SE3Pose;
use super::GeometryError;
use crate::field::{BoolField, PixelField2, ScalarField};

/// Points with camera-frame depth at or below this are treated as invalid.
pub const Z_MIN: f64 = 1e-3;

/// Pinhole intrinsics shared by every frame of a session, together with the
/// grid the dense fields live on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Self {
        Self { fx, fy, cx, cy, height, width }
    }

    /// True when a continuous pixel has all four bilinear neighbors on the
    /// grid, i.e. lies in `[0, w-1] x [0, h-1]`.
    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// Projects a camera-frame point to pixel coordinates.
///
/// The flag is false when the point sits at or behind the near plane
/// [`Z_MIN`]; the returned pixel is meaningless in that case.
pub fn project(intr: &CameraIntrinsics, point: &Vector3<f64>) -> (Vector2<f64>, bool) {
    if point.z <= Z_MIN {
        return (Vector2::zeros(), false);
    }
    let inv_z = 1.0 / point.z;
    (
        Vector2::new(intr.fx * point.x * inv_z + intr.cx, intr.fy * point.y * inv_z + intr.cy),
        true,
    )
}

/// Lifts a pixel at inverse depth `d` back to a camera-frame point.
pub fn backproject(
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
    inv_depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if inv_depth <= 0.0 {
        return Err(GeometryError::NonpositiveDisparity { disparity: inv_depth });
    }
    let z = 1.0 / inv_depth;
    Ok(Vector3::new((pixel.x - intr.cx) / intr.fx * z, (pixel.y - intr.cy) / intr.fy * z, z))
}

/// Warps every grid pixel of the source frame into the target frame under
/// the relative pose `g_ij` (source camera to target camera) and the source
/// inverse-depth field.
///
/// The mask is false where the source inverse depth is nonpositive, the
/// warped point falls at or behind the near plane, or the warped pixel
/// leaves the target grid. Masked entries hold zeros; they are excluded, not
/// clamped.
pub fn rigid_correspondence(
    g_ij: &SE3Pose,
    inv_depth_i: &ScalarField,
    intr: &CameraIntrinsics,
) -> (PixelField2, BoolField) {
    let (h, w) = (inv_depth_i.height(), inv_depth_i.width());
    let mut target = PixelField2::filled(h, w, [0.0, 0.0]);
    let mut valid = BoolField::filled(h, w, false);
    let rot = g_ij.rotation_matrix();
    for row in 0..h {
        for col in 0..w {
            let d = inv_depth_i.at(row, col);
            if d <= 0.0 {
                continue;
            }
            let z = 1.0 / d;
            let x = Vector3::new(
                (col as f64 - intr.cx) / intr.fx * z,
                (row as f64 - intr.cy) / intr.fy * z,
                z,
            );
            let y = rot * x + g_ij.translation;
            let (p, ok) = project(intr, &y);
            if ok && intr.in_bounds(&p) {
                target.set(row, col, [p.x, p.y]);
                valid.set(row, col, true);
            }
        }
    }
    (target, valid)
}

/// Per-pixel derivatives of the warped pixel with respect to left-multiplied
/// increments on either pose and to the source inverse depth, together with
/// the warped pixel itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelJacobians {
    /// The warped pixel in the target frame.
    pub warped: Vector2<f64>,
    /// d(warped pixel) / d(increment on the source pose).
    pub j_pose_i: Matrix2x6<f64>,
    /// d(warped pixel) / d(increment on the target pose).
    pub j_pose_j: Matrix2x6<f64>,
    /// d(warped pixel) / d(source inverse depth).
    pub j_depth: Vector2<f64>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Jacobians of the rigid correspondence at one source pixel.
///
/// `g_i` and `g_j` are the absolute world-to-camera poses; increments act on
/// them from the left. Returns `None` when the source inverse depth is
/// nonpositive or the warped point violates the near plane; bounds masking
/// is the caller's concern, matching [`rigid_correspondence`].
pub fn correspondence_jacobians(
    g_i: &SE3Pose,
    g_j: &SE3Pose,
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
    inv_depth: f64,
) -> Option<PixelJacobians> {
    relative_correspondence_jacobians(&g_j.compose(&g_i.inverse()), intr, pixel, inv_depth)
}

/// Same as [`correspondence_jacobians`] but with the relative pose
/// `g_ij = g_j * g_i^-1` precomposed, so per-edge callers pay the
/// composition once instead of per pixel.
pub fn relative_correspondence_jacobians(
    g_ij: &SE3Pose,
    intr: &CameraIntrinsics,
    pixel: &Vector2<f64>,
    inv_depth: f64,
) -> Option<PixelJacobians> {
    if inv_depth <= 0.0 {
        return None;
    }
    let z_i = 1.0 / inv_depth;
    let x_i = Vector3::new(
        (pixel.x - intr.cx) / intr.fx * z_i,
        (pixel.y - intr.cy) / intr.fy * z_i,
        z_i,
    );
    let rot = g_ij.rotation_matrix();
    let x_j = rot * x_i + g_ij.translation;
    if x_j.z <= Z_MIN {
        return None;
    }
    let inv_z = 1.0 / x_j.z;
    let warped = Vector2::new(
        intr.fx * x_j.x * inv_z + intr.cx,
        intr.fy * x_j.y * inv_z + intr.cy,
    );
    let j_proj = Matrix2x3::new(
        intr.fx * inv_z,
        0.0,
        -intr.fx * x_j.x * inv_z * inv_z,
        0.0,
        intr.fy * inv_z,
        -intr.fy * x_j.y * inv_z * inv_z,
    );

    // Left increment on the target pose perturbs the warped point directly:
    // x_j <- x_j + dt + dw x x_j.
    let mut d_xj_pose_j = nalgebra::Matrix3x6::<f64>::zeros();
    d_xj_pose_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    d_xj_pose_j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&x_j)));

    // Left increment on the source pose enters through its inverse:
    // x_j <- g_ij * (x_i - dt - dw x x_i).
    let mut d_xj_pose_i = nalgebra::Matrix3x6::<f64>::zeros();
    d_xj_pose_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rot));
    d_xj_pose_i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rot * skew(&x_i)));

    // d x_i / d d = -x_i / d, pushed through the rotation.
    let d_xj_depth = rot * (-x_i / inv_depth);

    Some(PixelJacobians {
        warped,
        j_pose_i: j_proj * d_xj_pose_i,
        j_pose_j: j_proj * d_xj_pose_j,
        j_depth: j_proj * d_xj_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3::se3_exp;
    use approx::assert_relative_eq;
    use nalgebra::Vector6;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(32.5, 32.5, 19.5, 14.5, 30, 40)
    }

    fn random_pose(rng: &mut impl Rng, scale: f64) -> SE3Pose {
        se3_exp(&Vector6::new(
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        ))
    }

    #[test]
    fn project_backproject_roundtrip() {
        let intr = test_intrinsics();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let pixel = Vector2::new(rng.gen_range(0.0..39.0), rng.gen_range(0.0..29.0));
            let d = rng.gen_range(0.05..2.0);
            let point = backproject(&intr, &pixel, d).unwrap();
            let (back, ok) = project(&intr, &point);
            assert!(ok);
            assert_relative_eq!(back, pixel, epsilon = 1e-10);
            assert_relative_eq!(1.0 / point.z, d, epsilon = 1e-12);
        }
    }

    #[test]
    fn project_rejects_near_plane() {
        let intr = test_intrinsics();
        let (_, ok) = project(&intr, &Vector3::new(0.0, 0.0, 1e-3));
        assert!(!ok);
        let (_, ok) = project(&intr, &Vector3::new(0.1, 0.1, -1.0));
        assert!(!ok);
    }

    #[test]
    fn backproject_rejects_nonpositive_disparity() {
        let intr = test_intrinsics();
        assert!(matches!(
            backproject(&intr, &Vector2::new(1.0, 1.0), 0.0),
            Err(GeometryError::NonpositiveDisparity { .. })
        ));
        assert!(backproject(&intr, &Vector2::new(1.0, 1.0), -0.3).is_err());
    }

    #[test]
    fn identity_warp_is_identity_on_grid() {
        let intr = test_intrinsics();
        let d = ScalarField::filled(30, 40, 0.5);
        let (target, valid) = rigid_correspondence(&SE3Pose::identity(), &d, &intr);
        for row in 0..30 {
            for col in 0..40 {
                assert!(valid.at(row, col));
                let p = target.at(row, col);
                assert_relative_eq!(p[0], col as f64, epsilon = 1e-10);
                assert_relative_eq!(p[1], row as f64, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn out_of_bounds_pixels_are_masked_and_zeroed() {
        let intr = test_intrinsics();
        let d = ScalarField::filled(30, 40, 0.5);
        // A large lateral shift pushes part of the grid outside.
        let g = SE3Pose::new(nalgebra::UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 0.0));
        let (target, valid) = rigid_correspondence(&g, &d, &intr);
        let masked = (0..30 * 40).filter(|&k| !valid.as_slice()[k]).count();
        assert!(masked > 0, "expected some pixels to leave the grid");
        for row in 0..30 {
            for col in 0..40 {
                if !valid.at(row, col) {
                    assert_eq!(target.at(row, col), [0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn nonpositive_depth_pixels_are_masked() {
        let intr = test_intrinsics();
        let mut d = ScalarField::filled(30, 40, 0.5);
        d.set(3, 4, 0.0);
        d.set(5, 6, -1.0);
        let (_, valid) = rigid_correspondence(&SE3Pose::identity(), &d, &intr);
        assert!(!valid.at(3, 4));
        assert!(!valid.at(5, 6));
        assert!(valid.at(0, 0));
    }

    /// Warp of one pixel as a plain function of the two poses and depth,
    /// used as the finite-difference baseline.
    fn warp_pixel(
        g_i: &SE3Pose,
        g_j: &SE3Pose,
        intr: &CameraIntrinsics,
        pixel: &Vector2<f64>,
        d: f64,
    ) -> Vector2<f64> {
        let x = backproject(intr, pixel, d).unwrap();
        let y = g_j.compose(&g_i.inverse()).transform(&x);
        let (p, ok) = project(intr, &y);
        assert!(ok, "finite-difference probe left the valid region");
        p
    }

    #[test]
    fn jacobians_match_central_differences() {
        let intr = test_intrinsics();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let h = 1e-6;
        for trial in 0..200 {
            let g_i = random_pose(&mut rng, 0.2);
            let g_j = random_pose(&mut rng, 0.2);
            let pixel = Vector2::new(rng.gen_range(5.0..35.0), rng.gen_range(5.0..25.0));
            let d = rng.gen_range(0.2..0.8);
            let jac = match correspondence_jacobians(&g_i, &g_j, &intr, &pixel, d) {
                Some(j) => j,
                None => continue,
            };
            assert_relative_eq!(jac.warped, warp_pixel(&g_i, &g_j, &intr, &pixel, d), epsilon = 1e-12);

            for k in 0..6 {
                let mut delta = Vector6::zeros();
                delta[k] = h;
                let plus = warp_pixel(&g_i.left_update(&delta), &g_j, &intr, &pixel, d);
                delta[k] = -h;
                let minus = warp_pixel(&g_i.left_update(&delta), &g_j, &intr, &pixel, d);
                let fd = (plus - minus) / (2.0 * h);
                let an = jac.j_pose_i.column(k);
                let denom = fd.norm().max(1e-6);
                assert!(
                    (Vector2::new(an[0], an[1]) - fd).norm() / denom < 1e-5,
                    "pose_i column {k} mismatch in trial {trial}: {an:?} vs {fd:?}"
                );

                delta[k] = h;
                let plus = warp_pixel(&g_i, &g_j.left_update(&delta), &intr, &pixel, d);
                delta[k] = -h;
                let minus = warp_pixel(&g_i, &g_j.left_update(&delta), &intr, &pixel, d);
                let fd = (plus - minus) / (2.0 * h);
                let an = jac.j_pose_j.column(k);
                let denom = fd.norm().max(1e-6);
                assert!(
                    (Vector2::new(an[0], an[1]) - fd).norm() / denom < 1e-5,
                    "pose_j column {k} mismatch in trial {trial}"
                );
            }

            let hd = 1e-7;
            let plus = warp_pixel(&g_i, &g_j, &intr, &pixel, d + hd);
            let minus = warp_pixel(&g_i, &g_j, &intr, &pixel, d - hd);
            let fd = (plus - minus) / (2.0 * hd);
            let denom = fd.norm().max(1e-6);
            assert!(
                (jac.j_depth - fd).norm() / denom < 1e-5,
                "depth column mismatch in trial {trial}: {:?} vs {fd:?}",
                jac.j_depth
            );
        }
    }

    #[test]
    fn depth_jacobian_closed_form_at_identity_relative_pose() {
        // With identical poses the warp is the identity and the depth
        // derivative vanishes; with a pure translation it has the closed
        // form (fx*tx - xc*tz, fy*ty - yc*tz) / (z * d) with (xc, yc) the
        // centered warped pixel.
        let intr = test_intrinsics();
        let pixel = Vector2::new(12.0, 9.0);
        let d = 0.5;
        let g = SE3Pose::identity();
        let jac = correspondence_jacobians(&g, &g, &intr, &pixel, d).unwrap();
        assert!(jac.j_depth.norm() < 1e-14);

        let t = Vector3::new(0.07, -0.04, 0.03);
        let g_j = SE3Pose::new(nalgebra::UnitQuaternion::identity(), t);
        let jac = correspondence_jacobians(&g, &g_j, &intr, &pixel, d).unwrap();
        let x = backproject(&intr, &pixel, d).unwrap();
        let y = x + t;
        let (p, _) = project(&intr, &y);
        let xc = p.x - intr.cx;
        let yc = p.y - intr.cy;
        let expected =
            Vector2::new(intr.fx * t.x - xc * t.z, intr.fy * t.y - yc * t.z) / (y.z * d);
        assert_relative_eq!(jac.j_depth, expected, epsilon = 1e-10);
    }

    #[test]
    fn pose_jacobians_negate_at_identity_relative_pose() {
        let intr = test_intrinsics();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let g = random_pose(&mut rng, 0.3);
            let pixel = Vector2::new(rng.gen_range(2.0..37.0), rng.gen_range(2.0..27.0));
            let d = rng.gen_range(0.2..0.9);
            let jac = correspondence_jacobians(&g, &g, &intr, &pixel, d).unwrap();
            assert_relative_eq!(jac.j_pose_i, -jac.j_pose_j, epsilon = 1e-9);
        }
    }
}
