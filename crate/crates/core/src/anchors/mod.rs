//! Neural voxel anchors: voxelization, frustum culling, on-demand Gaussian
//! generation and anchor growing/pruning.

mod densify;
mod heads;

use std::collections::BTreeSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use densify::{grow_anchors, prune_anchors, DensifyStats};
pub use heads::{spawn_backward, spawn_gaussians, AnchorGrad, GaussianHeads, HeadGrads, SpawnTape, SCALE_RAW_RANGE};

use crate::error::{Error, Result};
use crate::math::Quaternion;
use crate::render::Camera;
use crate::Real;

/// Length of an anchor's feature vector.
pub const FEATURE_DIM: usize = 32;
/// Gaussians generated per anchor.
pub const GAUSSIANS_PER_ANCHOR: usize = 10;

/// A neural voxel: a lattice point carrying a learned feature, a per-axis
/// extent and one offset per generated Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: u64,
    /// Integer lattice coordinates; `center = lattice * voxel_size`.
    pub lattice: [i64; 3],
    pub center: [Real; 3],
    pub feature: Vec<Real>,
    pub scale: [Real; 3],
    pub offsets: Vec<[Real; 3]>,
}

impl Anchor {
    pub fn new(id: u64, lattice: [i64; 3], voxel_size: Real, feature: Vec<Real>, k: usize) -> Self {
        Self {
            id,
            lattice,
            center: lattice_center(lattice, voxel_size),
            feature,
            scale: [voxel_size; 3],
            offsets: vec![[0.0; 3]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.offsets.len()
    }

    pub fn num_params(&self) -> usize {
        self.feature.len() + 3 * self.offsets.len() + 3
    }

    /// Canonical position of Gaussian `slot`: `x_v + O_slot ⊙ l_v`.
    pub fn gaussian_position(&self, slot: usize) -> [Real; 3] {
        let o = self.offsets[slot];
        [
            self.center[0] + o[0] * self.scale[0],
            self.center[1] + o[1] * self.scale[1],
            self.center[2] + o[2] * self.scale[2],
        ]
    }
}

/// A Gaussian decoded from an anchor for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralGaussian {
    pub position: [Real; 3],
    pub rotation: Quaternion,
    pub scale: [Real; 3],
    pub color: [Real; 3],
    pub opacity: Real,
    pub anchor_id: u64,
    pub slot: usize,
}

/// Gradient of a loss w.r.t. one Gaussian's attributes. `rotation` is taken
/// w.r.t. the quaternion as stored in [`NeuralGaussian::rotation`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: [Real; 3],
    pub rotation: [Real; 4],
    pub scale: [Real; 3],
    pub color: [Real; 3],
    pub opacity: Real,
}

pub(crate) fn lattice_center(lattice: [i64; 3], voxel_size: Real) -> [Real; 3] {
    lattice.map(|i| i as Real * voxel_size)
}

pub fn quantize(p: [Real; 3], voxel_size: Real) -> [i64; 3] {
    p.map(|v| (v / voxel_size).round() as i64)
}

/// Lattice coordinates of the distinct voxels hit by `points`, in
/// lexicographic order.
pub fn voxelize_lattice(points: &[[Real; 3]], voxel_size: Real) -> Result<Vec<[i64; 3]>> {
    if points.is_empty() {
        return Err(Error::Domain("cannot voxelize an empty point set".into()));
    }
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::Domain(format!("voxel size must be positive, got {voxel_size}")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite point".into()));
    }
    let set: BTreeSet<[i64; 3]> = points.iter().map(|&p| quantize(p, voxel_size)).collect();
    Ok(set.into_iter().collect())
}

/// Voxel centers `round(p / ε) · ε`, deduplicated and lexicographically ordered.
pub fn voxelize(points: &[[Real; 3]], voxel_size: Real) -> Result<Vec<[Real; 3]>> {
    Ok(voxelize_lattice(points, voxel_size)?
        .into_iter()
        .map(|l| lattice_center(l, voxel_size))
        .collect())
}

/// Indices of anchors whose center, padded by the largest component of its
/// extent, lies inside all six frustum planes. Input order is preserved.
pub fn cull_visible(anchors: &[Anchor], camera: &Camera) -> Vec<usize> {
    let planes = camera.frustum_planes();
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let p = camera.world_to_camera(&Vector3::from(a.center));
            let pad = a.scale.iter().copied().fold(0.0, Real::max);
            planes.iter().all(|pl| pl.signed_distance(&p) >= -pad)
        })
        .map(|(i, _)| i)
        .collect()
}
