use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Rotation quaternion stored as (w, x, y, z). Not required to be unit length;
/// conversion normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: Real,
    pub x: Real,
    pub y: Real,
    pub z: Real,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: Real, x: Real, y: Real, z: Real) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [Real; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [Real; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> Real {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quaternion> {
        let n = self.norm();
        if !n.is_finite() {
            return Err(Error::Numeric(format!("quaternion norm overflowed: {:?}", self.to_array())));
        }
        if n == 0.0 {
            return Err(Error::Degenerate(format!(
                "cannot normalize quaternion {:?}",
                self.to_array()
            )));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }
}

/// Backward of `q / |q|`: maps the gradient w.r.t. the unit quaternion to the
/// gradient w.r.t. the raw one.
pub fn normalize_backward(raw: [Real; 4], d_unit: [Real; 4]) -> [Real; 4] {
    let n = (raw.iter().map(|v| v * v).sum::<Real>()).sqrt();
    let unit = raw.map(|v| v / n);
    let dot: Real = unit.iter().zip(d_unit.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (d_unit[i] - unit[i] * dot) / n;
    }
    out
}

/// Rotation matrix of `q` after normalization.
pub fn quaternion_to_rotation(q: Quaternion) -> Result<Matrix3<Real>> {
    Ok(unit_quaternion_to_rotation(q.normalized()?))
}

pub(crate) fn unit_quaternion_to_rotation(q: Quaternion) -> Matrix3<Real> {
    let Quaternion { w, x, y, z } = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient w.r.t. a unit quaternion given the gradient w.r.t. its rotation matrix.
pub(crate) fn unit_rotation_backward(q: Quaternion, g: &Matrix3<Real>) -> [Real; 4] {
    let Quaternion { w, x, y, z } = q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - w * g[(1, 2)]
        + z * g[(2, 0)]
        + w * g[(2, 1)])
        - 4.0 * x * (g[(1, 1)] + g[(2, 2)]);
    let dy = 2.0 * (x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
        - w * g[(2, 0)]
        + z * g[(2, 1)])
        - 4.0 * y * (g[(0, 0)] + g[(2, 2)]);
    let dz = 2.0 * (-w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)])
        - 4.0 * z * (g[(0, 0)] + g[(1, 1)]);
    [dw, dx, dy, dz]
}

/// `R S Sᵀ Rᵀ` for per-axis standard deviations `s` and rotation `q`.
pub fn covariance_from_scale_rotation(s: [Real; 3], q: Quaternion) -> Result<Matrix3<Real>> {
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("scales must be positive, got {s:?}")));
    }
    let r = quaternion_to_rotation(q)?;
    Ok(covariance_from_rotation(&r, s))
}

pub(crate) fn covariance_from_rotation(r: &Matrix3<Real>, s: [Real; 3]) -> Matrix3<Real> {
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    m * m.transpose()
}

/// Backward of [`covariance_from_scale_rotation`] w.r.t. the scales and the raw
/// (unnormalized) quaternion. `g` is the gradient w.r.t. every entry of Σ.
pub fn covariance_backward(
    s: [Real; 3],
    q_raw: Quaternion,
    g: &Matrix3<Real>,
) -> Result<([Real; 3], [Real; 4])> {
    let unit = q_raw.normalized()?;
    let r = unit_quaternion_to_rotation(unit);
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    let dm = (g + g.transpose()) * m;
    let mut ds = [0.0; 3];
    let mut dr = Matrix3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            ds[j] += dm[(i, j)] * r[(i, j)];
            dr[(i, j)] = dm[(i, j)] * s[j];
        }
    }
    let d_unit = unit_rotation_backward(unit, &dr);
    Ok((ds, normalize_backward(q_raw.to_array(), d_unit)))
}
