use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::math::LrSchedule;
use crate::Real;

/// Initial and final learning rate of one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPair {
    pub initial: Real,
    #[serde(rename = "final")]
    pub final_value: Real,
}

impl LrPair {
    pub const fn new(initial: Real, final_value: Real) -> Self {
        Self { initial, final_value }
    }

    pub fn schedule(&self, max_steps: u64) -> LrSchedule {
        LrSchedule::new(self.initial, self.final_value, max_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub offsets: LrPair,
    pub feature: LrPair,
    pub anchor_scale: LrPair,
    pub opacity_head: LrPair,
    pub color_head: LrPair,
    /// Rotation and scale heads.
    pub covariance_head: LrPair,
    pub grid: LrPair,
    pub decoder: LrPair,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            offsets: LrPair::new(0.01, 1e-5),
            feature: LrPair::new(0.0075, 0.00075),
            anchor_scale: LrPair::new(0.007, 0.0007),
            opacity_head: LrPair::new(0.002, 2e-6),
            color_head: LrPair::new(0.008, 5e-7),
            covariance_head: LrPair::new(0.004, 4e-6),
            grid: LrPair::new(0.0016, 1.6e-4),
            decoder: LrPair::new(0.00016, 1.6e-5),
        }
    }
}

impl LearningRates {
    pub fn all(&self) -> [(&'static str, LrPair); 8] {
        [
            ("offsets", self.offsets),
            ("feature", self.feature),
            ("anchor_scale", self.anchor_scale),
            ("opacity_head", self.opacity_head),
            ("color_head", self.color_head),
            ("covariance_head", self.covariance_head),
            ("grid", self.grid),
            ("decoder", self.decoder),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub start: u64,
    pub interval: u64,
    pub grow_until: u64,
    pub grad_threshold: Real,
    pub opacity_threshold: Real,
    pub refine_grad_threshold: Real,
    pub refine_opacity_threshold: Real,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            start: 500,
            interval: 100,
            grow_until: 12000,
            grad_threshold: 0.0002,
            opacity_threshold: 0.05,
            refine_grad_threshold: 0.0001,
            refine_opacity_threshold: 0.03,
        }
    }
}

impl DensifyConfig {
    /// (grow, prune) at a per-stage iteration.
    pub fn active(&self, iteration: u64) -> (bool, bool) {
        let tick = iteration >= self.start && iteration % self.interval == 0;
        (tick && iteration <= self.grow_until, tick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub gamma_start: Real,
    pub gamma_end: Real,
    pub momentum: Real,
    /// Stage-2 iterations during which the trackers warm up without flagging.
    pub warmup: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            gamma_start: 0.05,
            gamma_end: 0.02,
            momentum: 0.4,
            warmup: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub voxel_size: Real,
    pub feature_dim: usize,
    pub gaussians_per_anchor: usize,
    pub head_hidden: usize,
    /// Gaussian extent at initialization, relative to the anchor extent.
    pub initial_scale: Real,
    /// Half-width of the uniform initial offsets, in anchor extents.
    pub offset_init: Real,
    pub feature_init: Real,
    pub field_resolution: [usize; 4],
    pub field_multipliers: Vec<usize>,
    pub field_dim: usize,
    pub field_init: Real,
    pub fuser_hidden: usize,
    /// Relative padding added around the point cloud for the field box.
    pub bbox_padding: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            feature_dim: 32,
            gaussians_per_anchor: 10,
            head_hidden: 32,
            initial_scale: 1.0,
            offset_init: 0.5,
            feature_init: 0.1,
            field_resolution: [16, 16, 16, 8],
            field_multipliers: vec![1, 2],
            field_dim: 16,
            field_init: 0.1,
            fuser_hidden: 64,
            bbox_padding: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_iterations: u64,
    pub stage2_iterations: u64,
    pub stage3_iterations: u64,
    pub background: [Real; 3],
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub densify: DensifyConfig,
    pub detect: DetectConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1_iterations: 3000,
            stage2_iterations: 14000,
            stage3_iterations: 14000,
            background: [0.0; 3],
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            densify: DensifyConfig::default(),
            detect: DetectConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            file: "config".into(),
            field: e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        for (name, pair) in self.lr.all() {
            if !(pair.initial > 0.0 && pair.final_value > 0.0 && pair.initial.is_finite() && pair.final_value.is_finite()) {
                return bad(format!("learning rate {name} must be positive: {pair:?}"));
            }
        }
        if self.stage1_iterations == 0 || self.stage2_iterations == 0 || self.stage3_iterations == 0 {
            return bad("stage iteration counts must be positive".into());
        }
        if self.densify.interval == 0 {
            return bad("densify interval must be positive".into());
        }
        let m = &self.model;
        if !(m.voxel_size > 0.0) || m.feature_dim == 0 || m.gaussians_per_anchor == 0 || m.head_hidden == 0 {
            return bad("model sizes must be positive".into());
        }
        if m.field_resolution.iter().any(|&r| r < 2) || m.field_multipliers.is_empty() || m.field_dim == 0 {
            return bad("field resolution must be at least 2 per axis".into());
        }
        if !(0.0..=1.0).contains(&self.detect.momentum) {
            return bad(format!("EMA momentum {} outside [0, 1]", self.detect.momentum));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background must lie in [0, 1]".into());
        }
        self.loss.validate()
    }

    /// Steps over which stage-2 learning rates decay; stage 3 holds the final rates.
    pub fn lr_decay_steps(&self) -> u64 {
        self.stage2_iterations
    }
}

/// Whether growth and pruning run at this per-stage iteration, with the
/// default schedule.
pub fn densify_schedule_active(iteration: u64) -> (bool, bool) {
    DensifyConfig::default().active(iteration)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = TrainConfig::from_toml("stage1_iterations = 300\n[lr.grid]\ninitial = 0.01\nfinal = 0.001\n").unwrap();
        assert_eq!(c.stage1_iterations, 300);
        assert_eq!(c.stage2_iterations, 14000);
        assert_eq!(c.lr.grid, LrPair::new(0.01, 0.001));
        assert_eq!(c.lr.offsets, LrPair::new(0.01, 1e-5));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(TrainConfig::from_toml("stage2_iterations = 0"), Err(Error::Domain(_))));
        assert!(matches!(TrainConfig::from_toml("[lr.grid]\ninitial = -1.0\nfinal = 0.1"), Err(Error::Domain(_))));
        assert!(matches!(TrainConfig::from_toml("bogus = 1"), Err(Error::Parse { .. })));
    }

    #[test]
    fn schedule_points() {
        assert_eq!(densify_schedule_active(499), (false, false));
        assert_eq!(densify_schedule_active(500), (true, true));
        assert_eq!(densify_schedule_active(550), (false, false));
        assert_eq!(densify_schedule_active(12000), (true, true));
        assert_eq!(densify_schedule_active(12100), (false, true));
    }
}
