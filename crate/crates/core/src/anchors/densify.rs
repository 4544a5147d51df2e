use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{quantize, Anchor};
use crate::Real;

/// Statistics accumulated between two densification events. Rows are aligned
/// with the anchor list they were created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyStats {
    pub k: usize,
    /// Per Gaussian (`anchor * k + slot`): summed view-space gradient norm.
    pub grad_sum: Vec<Real>,
    pub grad_count: Vec<u64>,
    /// Per anchor: summed decoded opacity of its Gaussians.
    pub opacity_sum: Vec<Real>,
    pub opacity_count: Vec<u64>,
    pub window_start: u64,
}

impl DensifyStats {
    pub fn new(num_anchors: usize, k: usize, window_start: u64) -> Self {
        Self {
            k,
            grad_sum: vec![0.0; num_anchors * k],
            grad_count: vec![0; num_anchors * k],
            opacity_sum: vec![0.0; num_anchors],
            opacity_count: vec![0; num_anchors],
            window_start,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.opacity_sum.len()
    }

    pub fn reset(&mut self, num_anchors: usize, window_start: u64) {
        *self = Self::new(num_anchors, self.k, window_start);
    }

    pub fn record_gradient(&mut self, anchor: usize, slot: usize, norm: Real) {
        let i = anchor * self.k + slot;
        self.grad_sum[i] += norm;
        self.grad_count[i] += 1;
    }

    pub fn record_opacity(&mut self, anchor: usize, opacity: Real) {
        self.opacity_sum[anchor] += opacity;
        self.opacity_count[anchor] += 1;
    }

    pub fn mean_gradient(&self, anchor: usize, slot: usize) -> Option<Real> {
        let i = anchor * self.k + slot;
        (self.grad_count[i] > 0).then(|| self.grad_sum[i] / self.grad_count[i] as Real)
    }

    pub fn mean_opacity(&self, anchor: usize) -> Option<Real> {
        (self.opacity_count[anchor] > 0).then(|| self.opacity_sum[anchor] / self.opacity_count[anchor] as Real)
    }

    pub fn is_empty(&self) -> bool {
        self.grad_count.iter().all(|&c| c == 0) && self.opacity_count.iter().all(|&c| c == 0)
    }
}

/// New anchors for every Gaussian whose mean view-space gradient exceeds
/// `threshold` and whose quantized canonical position falls in an empty voxel.
/// New anchors copy the parent feature, start with zero offsets and extent
/// `voxel_size`, and take ids from `next_id`. Existing anchors are untouched.
pub fn grow_anchors(
    anchors: &[Anchor],
    stats: &DensifyStats,
    voxel_size: Real,
    threshold: Real,
    next_id: &mut u64,
) -> Vec<Anchor> {
    debug_assert_eq!(stats.num_anchors(), anchors.len());
    let mut occupied: BTreeSet<[i64; 3]> = anchors.iter().map(|a| a.lattice).collect();
    let mut grown = Vec::new();
    for (ai, anchor) in anchors.iter().enumerate() {
        for slot in 0..anchor.k() {
            let Some(mean) = stats.mean_gradient(ai, slot) else {
                continue;
            };
            if !(mean > threshold) {
                continue;
            }
            let lattice = quantize(anchor.gaussian_position(slot), voxel_size);
            if occupied.insert(lattice) {
                grown.push(Anchor::new(*next_id, lattice, voxel_size, anchor.feature.clone(), anchor.k()));
                *next_id += 1;
            }
        }
    }
    grown
}

/// Indices of anchors that survive pruning: an anchor is dropped when its mean
/// decoded opacity over the window is below `threshold`. Anchors never observed
/// in the window are kept.
pub fn prune_anchors(anchors: &[Anchor], stats: &DensifyStats, threshold: Real) -> Vec<usize> {
    debug_assert_eq!(stats.num_anchors(), anchors.len());
    (0..anchors.len())
        .filter(|&i| stats.mean_opacity(i).is_none_or(|m| m >= threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchors() -> Vec<Anchor> {
        (0..3).map(|i| Anchor::new(i, [i as i64, 0, 0], 0.5, vec![i as Real; 4], 2)).collect()
    }

    #[test]
    fn no_growth_below_threshold() {
        let a = anchors();
        let mut s = DensifyStats::new(3, 2, 0);
        s.record_gradient(0, 0, 1e-4);
        let mut id = 10;
        assert!(grow_anchors(&a, &s, 0.5, 2e-4, &mut id).is_empty());
        assert_eq!(id, 10);
    }

    #[test]
    fn occupied_voxel_not_duplicated() {
        let mut a = anchors();
        a[0].offsets[0] = [2.0, 0.0, 0.0]; // lands on anchor 1's voxel
        let mut s = DensifyStats::new(3, 2, 0);
        s.record_gradient(0, 0, 1.0);
        let mut id = 10;
        assert!(grow_anchors(&a, &s, 0.5, 2e-4, &mut id).is_empty());
    }

    #[test]
    fn low_opacity_anchor_pruned() {
        let a = anchors();
        let mut s = DensifyStats::new(3, 2, 0);
        s.record_opacity(0, 0.5);
        s.record_opacity(1, 0.01);
        s.record_opacity(2, 0.05);
        assert_eq!(prune_anchors(&a, &s, 0.05), vec![0, 2]);
    }
}
