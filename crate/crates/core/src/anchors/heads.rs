use nalgebra::Vector3;
use rand::Rng;

use super::{Anchor, GaussianGrad, NeuralGaussian};
use crate::error::{Error, Result};
use crate::math::{normalize_backward, sigmoid, Activation, Mlp, MlpTape, Quaternion};
use crate::render::Camera;
use crate::Real;

/// Raw scale outputs are clamped to this range before `exp`.
pub const SCALE_RAW_RANGE: (Real, Real) = (-10.0, 2.0);

/// The four attribute decoders. Each takes `[f_v, δ_vc, d_vc]` and emits one
/// block of outputs per generated Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHeads {
    pub k: usize,
    pub opacity: Mlp,
    pub color: Mlp,
    pub scale: Mlp,
    pub rotation: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub opacity: Vec<Real>,
    pub color: Vec<Real>,
    pub scale: Vec<Real>,
    pub rotation: Vec<Real>,
}

impl HeadGrads {
    pub fn zeros(heads: &GaussianHeads) -> Self {
        Self {
            opacity: vec![0.0; heads.opacity.num_params()],
            color: vec![0.0; heads.color.num_params()],
            scale: vec![0.0; heads.scale.num_params()],
            rotation: vec![0.0; heads.rotation.num_params()],
        }
    }

    pub fn add(&mut self, other: &HeadGrads) {
        for (a, b) in [
            (&mut self.opacity, &other.opacity),
            (&mut self.color, &other.color),
            (&mut self.scale, &other.scale),
            (&mut self.rotation, &other.rotation),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrad {
    pub feature: Vec<Real>,
    pub offsets: Vec<[Real; 3]>,
    pub scale: [Real; 3],
}

impl GaussianHeads {
    /// Heads with one hidden ReLU layer of width `hidden`. Zero-initialized.
    pub fn new(feature_dim: usize, k: usize, hidden: usize) -> Result<Self> {
        let input = feature_dim + 4;
        let mk = |out: usize| Mlp::zeros(&[input, hidden, out], &[Activation::Relu, Activation::Identity]);
        Ok(Self {
            k,
            opacity: mk(k)?,
            color: mk(3 * k)?,
            scale: mk(3 * k)?,
            rotation: mk(4 * k)?,
        })
    }

    /// Glorot weights; rotation biases start at the identity quaternion and
    /// scale biases at `ln(initial_scale)`.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R, initial_scale: Real) {
        for net in [&mut self.opacity, &mut self.color, &mut self.scale, &mut self.rotation] {
            net.init_glorot(rng);
        }
        let last = self.rotation.layers().len() - 1;
        for (i, b) in self.rotation.bias_mut(last).iter_mut().enumerate() {
            *b = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        let last = self.scale.layers().len() - 1;
        self.scale.bias_mut(last).fill(initial_scale.ln());
    }

    pub fn input_dim(&self) -> usize {
        self.opacity.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.opacity.num_params() + self.color.num_params() + self.scale.num_params() + self.rotation.num_params()
    }

    pub fn check(&self) -> Result<()> {
        let k = self.k;
        let dims = [
            (self.opacity.output_dim(), k),
            (self.color.output_dim(), 3 * k),
            (self.scale.output_dim(), 3 * k),
            (self.rotation.output_dim(), 4 * k),
        ];
        if k == 0 || dims.iter().any(|(got, want)| got != want) {
            return Err(Error::Contract(format!("head output dims {dims:?} inconsistent with k={k}")));
        }
        Ok(())
    }
}

/// Activations of one anchor's decoding, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct SpawnTape {
    opacity: MlpTape,
    color: MlpTape,
    scale: MlpTape,
    rotation: MlpTape,
}

/// Decodes the `k` Gaussians of `anchor` as seen from `camera`.
pub fn spawn_gaussians(anchor: &Anchor, heads: &GaussianHeads, camera: &Camera) -> Result<(Vec<NeuralGaussian>, SpawnTape)> {
    heads.check()?;
    if anchor.offsets.len() != heads.k {
        return Err(Error::Contract(format!(
            "anchor has {} offsets, heads decode {}",
            anchor.offsets.len(),
            heads.k
        )));
    }
    let to_anchor = Vector3::from(anchor.center) - camera.center;
    let dist = to_anchor.norm();
    if !(dist > 0.0) {
        return Err(Error::Degenerate(format!("anchor {} sits at the camera center", anchor.id)));
    }
    let dir = to_anchor / dist;
    let mut input = Vec::with_capacity(heads.input_dim());
    input.extend_from_slice(&anchor.feature);
    input.extend_from_slice(&[dist, dir.x, dir.y, dir.z]);

    let tape = SpawnTape {
        opacity: heads.opacity.forward(&input)?,
        color: heads.color.forward(&input)?,
        scale: heads.scale.forward(&input)?,
        rotation: heads.rotation.forward(&input)?,
    };
    let (op, col, sc, rot) = (tape.opacity.output(), tape.color.output(), tape.scale.output(), tape.rotation.output());
    let (lo, hi) = SCALE_RAW_RANGE;
    let mut out = Vec::with_capacity(heads.k);
    for i in 0..heads.k {
        let q = Quaternion::from_array([rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]]).normalized()?;
        out.push(NeuralGaussian {
            position: anchor.gaussian_position(i),
            rotation: q,
            scale: [0, 1, 2].map(|j| sc[3 * i + j].clamp(lo, hi).exp() * anchor.scale[j]),
            color: [0, 1, 2].map(|j| sigmoid(col[3 * i + j])),
            opacity: sigmoid(op[i]),
            anchor_id: anchor.id,
            slot: i,
        });
    }
    Ok((out, tape))
}

/// Reverse of [`spawn_gaussians`]. Head parameter gradients are accumulated
/// into `head_grads`; the anchor's own gradients are returned.
pub fn spawn_backward(
    anchor: &Anchor,
    heads: &GaussianHeads,
    tape: &SpawnTape,
    gaussians: &[NeuralGaussian],
    grads: &[GaussianGrad],
    head_grads: &mut HeadGrads,
) -> AnchorGrad {
    let k = heads.k;
    let (lo, hi) = SCALE_RAW_RANGE;
    let mut d_op = vec![0.0; k];
    let mut d_col = vec![0.0; 3 * k];
    let mut d_sc = vec![0.0; 3 * k];
    let mut d_rot = vec![0.0; 4 * k];
    let mut d_offsets = vec![[0.0; 3]; k];
    let mut d_scale = [0.0; 3];
    let sc = tape.scale.output();
    let rot = tape.rotation.output();
    for i in 0..k {
        let (g, gd) = (&gaussians[i], &grads[i]);
        d_op[i] = gd.opacity * g.opacity * (1.0 - g.opacity);
        for j in 0..3 {
            d_col[3 * i + j] = gd.color[j] * g.color[j] * (1.0 - g.color[j]);
            let raw = sc[3 * i + j];
            let unit = raw.clamp(lo, hi).exp();
            if raw > lo && raw < hi {
                d_sc[3 * i + j] = gd.scale[j] * unit * anchor.scale[j];
            }
            d_scale[j] += gd.scale[j] * unit + gd.position[j] * anchor.offsets[i][j];
            d_offsets[i][j] = gd.position[j] * anchor.scale[j];
        }
        let raw_q = [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]];
        let dq = normalize_backward(raw_q, gd.rotation);
        d_rot[4 * i..4 * i + 4].copy_from_slice(&dq);
    }
    let mut d_input = heads.opacity.backward(&tape.opacity, &d_op, &mut head_grads.opacity);
    for (net, t, d, acc) in [
        (&heads.color, &tape.color, &d_col, &mut head_grads.color),
        (&heads.scale, &tape.scale, &d_sc, &mut head_grads.scale),
        (&heads.rotation, &tape.rotation, &d_rot, &mut head_grads.rotation),
    ] {
        let di = net.backward(t, d, acc);
        d_input.iter_mut().zip(di).for_each(|(a, b)| *a += b);
    }
    AnchorGrad {
        feature: d_input[..anchor.feature.len()].to_vec(),
        offsets: d_offsets,
        scale: d_scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{FEATURE_DIM, GAUSSIANS_PER_ANCHOR};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Anchor, GaussianHeads, Camera) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut heads = GaussianHeads::new(FEATURE_DIM, GAUSSIANS_PER_ANCHOR, 32).unwrap();
        heads.init(&mut rng, 0.5);
        let anchor = Anchor::new(7, [0, 0, 0], 0.1, vec![0.1; FEATURE_DIM], GAUSSIANS_PER_ANCHOR);
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            16,
            16,
            20.0,
        )
        .unwrap();
        (anchor, heads, cam)
    }

    #[test]
    fn zero_offsets_put_gaussians_at_center() {
        let (anchor, heads, cam) = setup();
        let (gs, _) = spawn_gaussians(&anchor, &heads, &cam).unwrap();
        assert_eq!(gs.len(), 10);
        for g in &gs {
            assert_eq!(g.position, anchor.center);
            assert!(g.opacity > 0.0 && g.opacity < 1.0);
            assert!(g.scale.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn offset_scaled_by_extent() {
        let (mut anchor, heads, cam) = setup();
        anchor.offsets[0] = [1.0, 0.0, 0.0];
        let (gs, _) = spawn_gaussians(&anchor, &heads, &cam).unwrap();
        assert_eq!(gs[0].position, [0.1, 0.0, 0.0]);
    }

    #[test]
    fn anchor_at_camera_center_is_degenerate() {
        let (anchor, heads, mut cam) = setup();
        cam.center = Vector3::zeros();
        assert!(matches!(spawn_gaussians(&anchor, &heads, &cam), Err(Error::Degenerate(_))));
    }
}
