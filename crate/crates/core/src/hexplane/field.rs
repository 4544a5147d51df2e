use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Axis pairs of the six planes: XY, XZ, YZ, XT, YT, ZT (T is axis 3).
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
pub const PLANE_NAMES: [&str; 6] = ["xy", "xz", "yz", "xt", "yt", "zt"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldShape {
    /// Node counts along x, y, z, t at multiplier 1.
    pub base_resolution: [usize; 4],
    pub multipliers: Vec<usize>,
    /// Feature channels per node.
    pub feature_dim: usize,
}

impl FieldShape {
    pub fn resolution(&self, scale: usize) -> [usize; 4] {
        self.base_resolution.map(|r| r * self.multipliers[scale])
    }

    /// Length of the concatenated query output.
    pub fn output_dim(&self) -> usize {
        self.feature_dim * self.multipliers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PlaneLayout {
    offset: usize,
    res_a: usize,
    res_b: usize,
}

/// Six-plane factorization of a 4D feature field over a bounding box and
/// normalized time `[0, 1]`. All grids live in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneField {
    shape: FieldShape,
    bbox_min: [Real; 3],
    bbox_max: [Real; 3],
    grids: Vec<Real>,
    layouts: Vec<PlaneLayout>,
}

/// Bilinear sample location on one plane.
#[derive(Debug, Clone, Copy)]
struct Sample {
    nodes: [usize; 4],
    fa: Real,
    fb: Real,
    /// d(cell coordinate)/d(world coordinate) along the plane axes, zero when clamped.
    scale_a: Real,
    scale_b: Real,
    axis_a: usize,
    axis_b: usize,
}

impl HexPlaneField {
    pub fn new(shape: FieldShape, bbox_min: [Real; 3], bbox_max: [Real; 3]) -> Result<Self> {
        if shape.multipliers.is_empty() || shape.feature_dim == 0 {
            return Err(Error::Contract("field needs at least one scale and channel".into()));
        }
        if shape.base_resolution.iter().any(|&r| r < 2) || shape.multipliers.iter().any(|&m| m == 0) {
            return Err(Error::Contract("every axis needs at least two nodes".into()));
        }
        for a in 0..3 {
            if !(bbox_max[a] > bbox_min[a]) || !bbox_min[a].is_finite() || !bbox_max[a].is_finite() {
                return Err(Error::Domain(format!(
                    "degenerate bounding box along axis {a}: [{}, {}]",
                    bbox_min[a], bbox_max[a]
                )));
            }
        }
        let layouts = Self::layouts_of(&shape);
        let len = layouts.iter().map(|l| l.res_a * l.res_b).sum::<usize>() * shape.feature_dim;
        Ok(Self {
            shape,
            bbox_min,
            bbox_max,
            grids: vec![0.0; len],
            layouts,
        })
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, range: Real) {
        for v in &mut self.grids {
            *v = rng.random_range(-range..range);
        }
    }

    fn layouts_of(shape: &FieldShape) -> Vec<PlaneLayout> {
        let mut out = Vec::with_capacity(6 * shape.multipliers.len());
        let mut offset = 0;
        for s in 0..shape.multipliers.len() {
            let res = shape.resolution(s);
            for (a, b) in PLANE_AXES {
                out.push(PlaneLayout {
                    offset,
                    res_a: res[a],
                    res_b: res[b],
                });
                offset += res[a] * res[b] * shape.feature_dim;
            }
        }
        out
    }

    fn layout(&self, scale: usize, plane: usize) -> PlaneLayout {
        self.layouts[scale * 6 + plane]
    }

    pub fn shape(&self) -> &FieldShape {
        &self.shape
    }

    pub fn bbox(&self) -> ([Real; 3], [Real; 3]) {
        (self.bbox_min, self.bbox_max)
    }

    pub fn num_params(&self) -> usize {
        self.grids.len()
    }

    pub fn params(&self) -> &[Real] {
        &self.grids
    }

    pub fn params_mut(&mut self) -> &mut [Real] {
        &mut self.grids
    }

    pub fn output_dim(&self) -> usize {
        self.shape.output_dim()
    }

    /// Feature vector stored at node `(ia, ib)` of a plane.
    pub fn node(&self, scale: usize, plane: usize, ia: usize, ib: usize) -> &[Real] {
        let l = self.layout(scale, plane);
        let h = self.shape.feature_dim;
        let o = l.offset + (ib * l.res_a + ia) * h;
        &self.grids[o..o + h]
    }

    pub fn node_mut(&mut self, scale: usize, plane: usize, ia: usize, ib: usize) -> &mut [Real] {
        let l = self.layout(scale, plane);
        let h = self.shape.feature_dim;
        let o = l.offset + (ib * l.res_a + ia) * h;
        &mut self.grids[o..o + h]
    }

    /// Grid dimensions `(res_a, res_b)` of one plane.
    pub fn plane_resolution(&self, scale: usize, plane: usize) -> (usize, usize) {
        let l = self.layout(scale, plane);
        (l.res_a, l.res_b)
    }

    fn axis_coord(&self, axis: usize, value: Real, res: usize) -> (Real, Real) {
        let steps = (res - 1) as Real;
        if axis == 3 {
            let t = value.clamp(0.0, 1.0);
            return (t * steps, 0.0);
        }
        let (lo, hi) = (self.bbox_min[axis], self.bbox_max[axis]);
        let u = (value - lo) / (hi - lo);
        if u <= 0.0 {
            (0.0, 0.0)
        } else if u >= 1.0 {
            (steps, 0.0)
        } else {
            (u * steps, steps / (hi - lo))
        }
    }

    fn samples(&self, p: [Real; 4]) -> Vec<Sample> {
        let h = self.shape.feature_dim;
        let mut out = Vec::with_capacity(6 * self.shape.multipliers.len());
        for (li, l) in self.layouts.iter().enumerate() {
            let (axis_a, axis_b) = PLANE_AXES[li % 6];
            let (ua, scale_a) = self.axis_coord(axis_a, p[axis_a], l.res_a);
            let (ub, scale_b) = self.axis_coord(axis_b, p[axis_b], l.res_b);
            let ia = (ua.floor() as usize).min(l.res_a - 2);
            let ib = (ub.floor() as usize).min(l.res_b - 2);
            let node = |a: usize, b: usize| l.offset + (b * l.res_a + a) * h;
            out.push(Sample {
                nodes: [node(ia, ib), node(ia + 1, ib), node(ia, ib + 1), node(ia + 1, ib + 1)],
                fa: ua - ia as Real,
                fb: ub - ib as Real,
                scale_a,
                scale_b,
                axis_a,
                axis_b,
            });
        }
        out
    }

    /// Feature at `(x, y, z, t)`: per scale, bilinear samples of the six planes
    /// summed; scales concatenated. Spatial coordinates are clamped to the box.
    pub fn query(&self, x: Real, y: Real, z: Real, t: Real) -> Result<Vec<Real>> {
        if ![x, y, z, t].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite field query ({x}, {y}, {z}, {t})")));
        }
        Ok(self.query_unchecked([x, y, z, t]))
    }

    pub(crate) fn query_unchecked(&self, p: [Real; 4]) -> Vec<Real> {
        let h = self.shape.feature_dim;
        let mut out = vec![0.0; self.output_dim()];
        for (si, s) in self.samples(p).iter().enumerate() {
            let slice = &mut out[(si / 6) * h..(si / 6 + 1) * h];
            let w = [
                (1.0 - s.fa) * (1.0 - s.fb),
                s.fa * (1.0 - s.fb),
                (1.0 - s.fa) * s.fb,
                s.fa * s.fb,
            ];
            for (k, &n) in s.nodes.iter().enumerate() {
                for c in 0..h {
                    slice[c] += w[k] * self.grids[n + c];
                }
            }
        }
        out
    }

    /// Reverse of [`HexPlaneField::query`]: accumulates node gradients into
    /// `grid_grad` and returns the gradient w.r.t. the spatial coordinates.
    pub fn query_backward(&self, p: [Real; 4], d_feature: &[Real], grid_grad: &mut [Real]) -> [Real; 3] {
        let h = self.shape.feature_dim;
        let mut d_coord = [0.0; 3];
        for (si, s) in self.samples(p).iter().enumerate() {
            let g = &d_feature[(si / 6) * h..(si / 6 + 1) * h];
            let w = [
                (1.0 - s.fa) * (1.0 - s.fb),
                s.fa * (1.0 - s.fb),
                (1.0 - s.fa) * s.fb,
                s.fa * s.fb,
            ];
            let mut d_fa = 0.0;
            let mut d_fb = 0.0;
            for c in 0..h {
                let n = [
                    self.grids[s.nodes[0] + c],
                    self.grids[s.nodes[1] + c],
                    self.grids[s.nodes[2] + c],
                    self.grids[s.nodes[3] + c],
                ];
                d_fa += g[c] * ((1.0 - s.fb) * (n[1] - n[0]) + s.fb * (n[3] - n[2]));
                d_fb += g[c] * ((1.0 - s.fa) * (n[2] - n[0]) + s.fa * (n[3] - n[1]));
                for k in 0..4 {
                    grid_grad[s.nodes[k] + c] += w[k] * g[c];
                }
            }
            if s.axis_a < 3 {
                d_coord[s.axis_a] += d_fa * s.scale_a;
            }
            if s.axis_b < 3 {
                d_coord[s.axis_b] += d_fb * s.scale_b;
            }
        }
        d_coord
    }

    /// Bilinear weights of each plane sample at a point; each group of four sums to one.
    pub fn interpolation_weights(&self, x: Real, y: Real, z: Real, t: Real) -> Vec<[Real; 4]> {
        self.samples([x, y, z, t])
            .iter()
            .map(|s| {
                [
                    (1.0 - s.fa) * (1.0 - s.fb),
                    s.fa * (1.0 - s.fb),
                    (1.0 - s.fa) * s.fb,
                    s.fa * s.fb,
                ]
            })
            .collect()
    }

    pub(crate) fn from_parts(shape: FieldShape, bbox_min: [Real; 3], bbox_max: [Real; 3], grids: Vec<Real>) -> Result<Self> {
        let mut field = Self::new(shape, bbox_min, bbox_max)?;
        if grids.len() != field.grids.len() {
            return Err(Error::Contract(format!(
                "field expects {} values, got {}",
                field.grids.len(),
                grids.len()
            )));
        }
        field.grids = grids;
        Ok(field)
    }
}

/// Free-function form of [`HexPlaneField::query`].
pub fn hexplane_query(field: &HexPlaneField, x: Real, y: Real, z: Real, t: Real) -> Result<Vec<Real>> {
    field.query(x, y, z, t)
}

/// Total variation of every plane: per plane, the mean squared difference
/// between neighbouring nodes along both axes (averaged over channels),
/// summed over planes and scales.
pub fn tv_loss(field: &HexPlaneField) -> Real {
    tv_loss_impl(field, None)
}

/// [`tv_loss`] plus its gradient w.r.t. the grid buffer.
pub fn tv_loss_with_grad(field: &HexPlaneField) -> (Real, Vec<Real>) {
    let mut grad = vec![0.0; field.num_params()];
    let value = tv_loss_impl(field, Some(&mut grad));
    (value, grad)
}

fn tv_loss_impl(field: &HexPlaneField, mut grad: Option<&mut Vec<Real>>) -> Real {
    let h = field.shape.feature_dim;
    let mut total = 0.0;
    for l in &field.layouts {
        let pairs = (l.res_a - 1) * l.res_b + l.res_a * (l.res_b - 1);
        let norm = (pairs * h) as Real;
        let idx = |a: usize, b: usize| l.offset + (b * l.res_a + a) * h;
        let mut sum = 0.0;
        for b in 0..l.res_b {
            for a in 0..l.res_a {
                let here = idx(a, b);
                let mut neighbours = [None, None];
                if a + 1 < l.res_a {
                    neighbours[0] = Some(idx(a + 1, b));
                }
                if b + 1 < l.res_b {
                    neighbours[1] = Some(idx(a, b + 1));
                }
                for there in neighbours.into_iter().flatten() {
                    for c in 0..h {
                        let d = field.grids[there + c] - field.grids[here + c];
                        sum += d * d;
                        if let Some(g) = grad.as_deref_mut() {
                            g[there + c] += 2.0 * d / norm;
                            g[here + c] -= 2.0 * d / norm;
                        }
                    }
                }
            }
        }
        total += sum / norm;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_field() -> HexPlaneField {
        HexPlaneField::new(
            FieldShape {
                base_resolution: [3, 4, 5, 2],
                multipliers: vec![1, 2],
                feature_dim: 2,
            },
            [-1.0, -1.0, -1.0],
            [1.0, 1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn constant_field_gives_six_times_value() {
        let mut f = small_field();
        f.params_mut().iter_mut().for_each(|v| *v = 0.25);
        for p in [[0.3, -0.7, 0.1, 0.4], [1.0, 1.0, 1.0, 1.0], [-3.0, 0.0, 2.0, 0.0]] {
            let q = f.query(p[0], p[1], p[2], p[3]).unwrap();
            assert!(q.iter().all(|&v| (v - 1.5).abs() < 1e-12), "{q:?}");
        }
        assert_eq!(tv_loss(&f), 0.0);
    }

    #[test]
    fn node_query_sums_six_nodes() {
        let mut f = small_field();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        f.init_uniform(&mut rng, 1.0);
        // box corners are nodes at every scale
        let (x, y, z, t) = (-1.0, 1.0, -1.0, 1.0);
        let q = f.query(x, y, z, t).unwrap();
        for scale in 0..2 {
            let res = f.shape().resolution(scale);
            let idx = [0, res[1] - 1, 0, res[3] - 1];
            let mut expected = [0.0; 2];
            for (p, (a, b)) in PLANE_AXES.iter().enumerate() {
                let n = f.node(scale, p, idx[*a], idx[*b]);
                expected[0] += n[0];
                expected[1] += n[1];
            }
            for c in 0..2 {
                assert!((q[scale * 2 + c] - expected[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nan_query_rejected() {
        let f = small_field();
        assert!(matches!(f.query(Real::NAN, 0.0, 0.0, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let shape = small_field().shape().clone();
        assert!(HexPlaneField::new(shape, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    use rand::SeedableRng;
}
