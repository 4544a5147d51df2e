use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::camera::Camera;
use crate::Real;

/// Diagonal floor added to every projected covariance (pixels²).
pub const COV2D_FLOOR: Real = 0.3;

/// Screen-space footprint of a 3D Gaussian, plus what the reverse pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Pixel-space mean.
    pub mean: [Real; 2],
    /// Symmetric 2D covariance as (xx, xy, yy), floor included.
    pub cov: [Real; 3],
    /// View-space z.
    pub depth: Real,
    point_cam: Vector3<Real>,
    jacobian: Matrix2x3<Real>,
}

/// EWA projection of a Gaussian with world mean `mu` and covariance `sigma`.
/// Returns `None` when the mean is outside the (near, far) depth range.
pub fn project_gaussian(mu: &Vector3<Real>, sigma: &Matrix3<Real>, camera: &Camera) -> Option<Projection> {
    let p = camera.world_to_camera(mu);
    if !(p.z > camera.near && p.z < camera.far) {
        return None;
    }
    let z = p.z;
    let jacobian = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * p.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * p.y / (z * z),
    );
    let t = jacobian * camera.rotation;
    let cov2 = t * sigma * t.transpose();
    Some(Projection {
        mean: camera.project_camera_point(&p),
        cov: [
            cov2[(0, 0)] + COV2D_FLOOR,
            0.5 * (cov2[(0, 1)] + cov2[(1, 0)]),
            cov2[(1, 1)] + COV2D_FLOOR,
        ],
        depth: z,
        point_cam: p,
        jacobian,
    })
}

/// Reverse of [`project_gaussian`]. `d_cov` holds derivatives w.r.t. (xx, xy, yy)
/// where xy is the single shared off-diagonal value. Returns the gradients
/// w.r.t. the world mean and every entry of the 3D covariance.
pub fn project_backward(
    proj: &Projection,
    sigma: &Matrix3<Real>,
    camera: &Camera,
    d_mean: [Real; 2],
    d_cov: [Real; 3],
) -> (Vector3<Real>, Matrix3<Real>) {
    let w = camera.rotation;
    let j = proj.jacobian;
    let t = j * w;
    let g = Matrix2::new(d_cov[0], 0.5 * d_cov[1], 0.5 * d_cov[1], d_cov[2]);
    let d_sigma = t.transpose() * g * t;
    let d_t = (g + g.transpose()) * t * sigma;
    let d_j = d_t * w.transpose();

    let (x, y, z) = (proj.point_cam.x, proj.point_cam.y, proj.point_cam.z);
    let (fx, fy) = (camera.fx, camera.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dp = Vector3::zeros();
    // mean
    dp.x += d_mean[0] * fx / z;
    dp.y += d_mean[1] * fy / z;
    dp.z += -d_mean[0] * fx * x / z2 - d_mean[1] * fy * y / z2;
    // Jacobian entries
    dp.z += -d_j[(0, 0)] * fx / z2;
    dp.x += -d_j[(0, 2)] * fx / z2;
    dp.z += d_j[(0, 2)] * 2.0 * fx * x / z3;
    dp.z += -d_j[(1, 1)] * fy / z2;
    dp.y += -d_j[(1, 2)] * fy / z2;
    dp.z += d_j[(1, 2)] * 2.0 * fy * y / z3;

    (w.transpose() * dp, d_sigma)
}
