use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Pinhole camera. Camera space follows the x-right, y-down, z-forward
/// convention; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
///
/// The pose is stored as the world-to-camera rotation together with the
/// camera center, which keeps camera-to-world round trips exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<Real>,
    pub center: Vector3<Real>,
    pub timestamp: Real,
    pub near: Real,
    pub far: Real,
}

pub const DEFAULT_NEAR: Real = 0.01;
pub const DEFAULT_FAR: Real = 100.0;

/// Inward-facing plane `n·p + d >= 0` in camera space with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<Real>,
    pub offset: Real,
}

impl Plane {
    fn from_unnormalized(normal: Vector3<Real>, offset: Real) -> Self {
        let n = normal.norm();
        Self {
            normal: normal / n,
            offset: offset / n,
        }
    }

    pub fn signed_distance(&self, p: &Vector3<Real>) -> Real {
        self.normal.dot(p) + self.offset
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vector3<Real>,
        target: Vector3<Real>,
        up: Vector3<Real>,
        width: usize,
        height: usize,
        focal: Real,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::Degenerate("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::Degenerate("up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Ok(Self {
            fx: focal,
            fy: focal,
            cx: width as Real / 2.0,
            cy: height as Real / 2.0,
            width,
            height,
            rotation,
            center: eye,
            timestamp: 0.0,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Domain("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Domain(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("image size must be positive".into()));
        }
        let orth = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(orth < 1e-6) || !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("camera pose is not a finite rotation".into()));
        }
        Ok(())
    }

    pub fn translation(&self) -> Vector3<Real> {
        -(self.rotation * self.center)
    }

    pub fn world_to_camera(&self, p: &Vector3<Real>) -> Vector3<Real> {
        self.rotation * (p - self.center)
    }

    /// Pixel coordinates of a camera-space point (no depth check).
    pub fn project_camera_point(&self, p: &Vector3<Real>) -> [Real; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }

    /// The six inward-facing frustum planes: near, far, left, right, top, bottom.
    pub fn frustum_planes(&self) -> [Plane; 6] {
        let w = self.width as Real;
        let h = self.height as Real;
        [
            Plane::from_unnormalized(Vector3::new(0.0, 0.0, 1.0), -self.near),
            Plane::from_unnormalized(Vector3::new(0.0, 0.0, -1.0), self.far),
            Plane::from_unnormalized(Vector3::new(self.fx, 0.0, self.cx), 0.0),
            Plane::from_unnormalized(Vector3::new(-self.fx, 0.0, w - self.cx), 0.0),
            Plane::from_unnormalized(Vector3::new(0.0, self.fy, self.cy), 0.0),
            Plane::from_unnormalized(Vector3::new(0.0, -self.fy, h - self.cy), 0.0),
        ]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
