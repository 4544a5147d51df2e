//! The three-stage optimization schedule, crude-view detection and the
//! refinement stack.

mod config;
mod detect;
mod model;
mod trainer;
mod view;

pub use config::{
    densify_schedule_active, DensifyConfig, DetectConfig, LearningRates, LrPair, ModelConfig, TrainConfig,
};
pub use detect::{
    detect_crude_gradient, detect_crude_psnr, gamma_schedule, gamma_value, gradient_deficit, quality_deficit,
    Detection, EmaTracker, FailureType, RefinementEntry, RefinementStack, EMA_MOMENTUM, GAMMA_END, GAMMA_START,
};
pub use model::{Gradients, Model, Optimizer};
pub use trainer::{CrudeViewDetector, Cursor, FrameScore, MetricsRow, Stage, Trainer};
pub use view::{backward_view, decode_view, render_view, ViewGradStats, ViewRender};
