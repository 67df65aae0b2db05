//! Similarity transforms and least-squares point-set alignment.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use super::GeometryError;

/// A similarity transform `p -> scale * (R p) + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Least-squares similarity aligning `src` onto `dst`: minimizes
/// `sum_k || s R src_k + t - dst_k ||^2` over scale, rotation, translation.
///
/// Requires at least three points with a cross-covariance of rank two or
/// more; otherwise fails with `degenerate-alignment`. The rotation includes
/// the usual sign correction so it is proper even for reflective optima.
pub fn umeyama_sim3(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<Sim3Transform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateAlignment {
            reason: format!("point counts differ: {} vs {}", src.len(), dst.len()),
        });
    }
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::DegenerateAlignment {
            reason: format!("need at least 3 points, got {n}"),
        });
    }
    let nf = n as f64;
    let mean_src: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / nf;
    let mean_dst: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / nf;

    let mut var_src = 0.0;
    let mut cross = Matrix3::zeros();
    for k in 0..n {
        let s = src[k] - mean_src;
        let d = dst[k] - mean_dst;
        var_src += s.norm_squared();
        cross += d * s.transpose();
    }
    var_src /= nf;
    cross /= nf;

    if var_src < 1e-18 {
        return Err(GeometryError::DegenerateAlignment {
            reason: "source points are coincident".into(),
        });
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sv = svd.singular_values;
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return Err(GeometryError::DegenerateAlignment {
            reason: "points are collinear (rank-deficient covariance)".into(),
        });
    }

    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rot_m = u * sign * v_t;
    let rotation = UnitQuaternion::from_matrix(&rot_m);
    let scale = (sv[0] + sv[1] + sign[(2, 2)] * sv[2]) / var_src;
    let translation = mean_dst - scale * (rotation * mean_src);
    Ok(Sim3Transform { scale, rotation, translation })
}
