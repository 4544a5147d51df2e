use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::anchors::{voxelize_lattice, Anchor, GaussianHeads, HeadGrads};
use crate::error::{Error, Result};
use crate::hexplane::{DecoderGrads, DeformationDecoders, FieldShape, HexPlaneField};
use crate::math::AdamState;
use crate::Real;

/// Every trainable quantity of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub voxel_size: Real,
    pub anchors: Vec<Anchor>,
    pub next_anchor_id: u64,
    pub heads: GaussianHeads,
    pub field: HexPlaneField,
    pub decoders: DeformationDecoders,
}

impl Model {
    /// Anchors on the voxelized point cloud, randomly initialized heads and
    /// field, zero deformation heads. The field box is the given box grown by
    /// `bbox_padding` of its extent on every side.
    pub fn init<R: Rng + ?Sized>(
        points: &[[Real; 3]],
        bbox_min: [Real; 3],
        bbox_max: [Real; 3],
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let eps = cfg.voxel_size;
        let k = cfg.gaussians_per_anchor;
        let lattice = voxelize_lattice(points, eps)?;
        let anchors: Vec<Anchor> = lattice
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let feature = (0..cfg.feature_dim)
                    .map(|_| rng.random_range(-cfg.feature_init..=cfg.feature_init))
                    .collect();
                let mut a = Anchor::new(i as u64, l, eps, feature, k);
                for o in a.offsets.iter_mut() {
                    *o = [0; 3].map(|_| rng.random_range(-cfg.offset_init..=cfg.offset_init));
                }
                a
            })
            .collect();
        let mut heads = GaussianHeads::new(cfg.feature_dim, k, cfg.head_hidden)?;
        heads.init(rng, cfg.initial_scale);

        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for j in 0..3 {
            let pad = (cfg.bbox_padding * (bbox_max[j] - bbox_min[j])).max(eps);
            lo[j] = bbox_min[j] - pad;
            hi[j] = bbox_max[j] + pad;
        }
        let shape = FieldShape {
            base_resolution: cfg.field_resolution,
            multipliers: cfg.field_multipliers.clone(),
            feature_dim: cfg.field_dim,
        };
        let mut field = HexPlaneField::new(shape, lo, hi)?;
        field.init_uniform(rng, cfg.field_init);
        let mut decoders = DeformationDecoders::new(field.output_dim(), cfg.fuser_hidden)?;
        decoders.init(rng);
        Ok(Self {
            voxel_size: eps,
            next_anchor_id: anchors.len() as u64,
            anchors,
            heads,
            field,
            decoders,
        })
    }

    pub fn k(&self) -> usize {
        self.heads.k
    }

    pub fn feature_dim(&self) -> usize {
        self.heads.input_dim() - 4
    }

    pub fn num_params(&self) -> usize {
        self.anchors.iter().map(Anchor::num_params).sum::<usize>()
            + self.heads.num_params()
            + self.field.num_params()
            + self.decoders.num_params()
    }

    pub fn check_finite(&self) -> Result<()> {
        let anchors_ok = self.anchors.iter().all(|a| {
            a.feature.iter().chain(a.scale.iter()).chain(a.offsets.iter().flatten()).all(|v| v.is_finite())
        });
        let field_ok = self.field.params().iter().all(|v| v.is_finite());
        if !anchors_ok || !field_ok {
            return Err(Error::Numeric("model parameters are not finite".into()));
        }
        for net in [
            &self.heads.opacity,
            &self.heads.color,
            &self.heads.scale,
            &self.heads.rotation,
            &self.decoders.fuser,
            &self.decoders.position,
            &self.decoders.rotation,
            &self.decoders.scale,
        ] {
            net.check_finite()?;
        }
        Ok(())
    }
}

/// Gradient buffers matching [`Model`]. Anchor rows follow the anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub feature: Vec<Real>,
    pub offsets: Vec<Real>,
    /// With respect to the log of each anchor extent.
    pub log_scale: Vec<Real>,
    pub heads: HeadGrads,
    pub field: Vec<Real>,
    pub decoders: DecoderGrads,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        let n = model.anchors.len();
        Self {
            feature: vec![0.0; n * model.feature_dim()],
            offsets: vec![0.0; n * model.k() * 3],
            log_scale: vec![0.0; n * 3],
            heads: HeadGrads::zeros(&model.heads),
            field: vec![0.0; model.field.num_params()],
            decoders: DecoderGrads::zeros(&model.decoders),
        }
    }
}

/// Adam moments of every parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub feature: AdamState,
    pub offsets: AdamState,
    pub anchor_scale: AdamState,
    pub opacity_head: AdamState,
    pub color_head: AdamState,
    pub scale_head: AdamState,
    pub rotation_head: AdamState,
    pub grid: AdamState,
    pub fuser: AdamState,
    pub position_decoder: AdamState,
    pub rotation_decoder: AdamState,
    pub scale_decoder: AdamState,
}

impl Optimizer {
    pub fn new(model: &Model) -> Self {
        let n = model.anchors.len();
        Self {
            feature: AdamState::new(n * model.feature_dim()),
            offsets: AdamState::new(n * model.k() * 3),
            anchor_scale: AdamState::new(n * 3),
            opacity_head: AdamState::new(model.heads.opacity.num_params()),
            color_head: AdamState::new(model.heads.color.num_params()),
            scale_head: AdamState::new(model.heads.scale.num_params()),
            rotation_head: AdamState::new(model.heads.rotation.num_params()),
            grid: AdamState::new(model.field.num_params()),
            fuser: AdamState::new(model.decoders.fuser.num_params()),
            position_decoder: AdamState::new(model.decoders.position.num_params()),
            rotation_decoder: AdamState::new(model.decoders.rotation.num_params()),
            scale_decoder: AdamState::new(model.decoders.scale.num_params()),
        }
    }

    fn anchor_groups(&mut self, feature_dim: usize, k: usize) -> [(&mut AdamState, usize); 3] {
        [
            (&mut self.feature, feature_dim),
            (&mut self.offsets, 3 * k),
            (&mut self.anchor_scale, 3),
        ]
    }

    /// Keeps the anchor rows listed in `keep` (ascending).
    pub fn retain_anchors(&mut self, keep: &[usize], feature_dim: usize, k: usize) {
        for (state, width) in self.anchor_groups(feature_dim, k) {
            for buf in [&mut state.m, &mut state.v] {
                let old = std::mem::take(buf);
                *buf = keep.iter().flat_map(|&i| old[i * width..(i + 1) * width].iter().copied()).collect();
            }
        }
    }

    /// Appends zeroed rows for `count` new anchors.
    pub fn push_anchors(&mut self, count: usize, feature_dim: usize, k: usize) {
        for (state, width) in self.anchor_groups(feature_dim, k) {
            state.m.resize(state.m.len() + count * width, 0.0);
            state.v.resize(state.v.len() + count * width, 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = [[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [0.0, 0.3, 0.1]];
        Model::init(&pts, [0.0; 3], [0.2, 0.3, 0.1], &ModelConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn init_counts() {
        let m = model();
        assert_eq!(m.anchors.len(), 3);
        assert_eq!(m.next_anchor_id, 3);
        let per_anchor = 32 + 3 + 30;
        assert_eq!(
            m.num_params(),
            3 * per_anchor + m.heads.num_params() + m.field.num_params() + m.decoders.num_params()
        );
        m.check_finite().unwrap();
        assert!(m.decoders.position.params().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn optimizer_rows_follow_anchors() {
        let m = model();
        let mut o = Optimizer::new(&m);
        for (i, v) in o.feature.m.iter_mut().enumerate() {
            *v = (i / 32) as Real;
        }
        o.retain_anchors(&[0, 2], 32, 10);
        assert_eq!(o.feature.m.len(), 64);
        assert_eq!(o.feature.m[32], 2.0);
        assert_eq!(o.offsets.m.len(), 60);
        o.push_anchors(1, 32, 10);
        assert_eq!(o.anchor_scale.v.len(), 9);
    }
}
