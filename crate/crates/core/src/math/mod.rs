//! Dense-math substrate: quaternions and covariances, a small MLP with an
//! explicit reverse pass, Adam, and learning-rate schedules.

mod adam;
mod mlp;
mod quat;
mod schedule;
pub use schedule::{lr_value, LrSchedule};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use mlp::{mlp_forward_backward, Activation, LayerShape, Mlp, MlpTape};
pub use quat::{
    covariance_backward, covariance_from_scale_rotation, normalize_backward,
    quaternion_to_rotation, Quaternion,
};


pub fn sigmoid(x: crate::Real) -> crate::Real {
    1.0 / (1.0 + (-x).exp())
}
