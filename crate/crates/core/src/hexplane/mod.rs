//! Six-plane space-time feature field and the geometry-only deformation it drives.

mod deform;
mod field;

pub use deform::{deform_backward, deform_gaussians, DecoderGrads, DeformTape, DeformationDecoders, MIN_SCALE};
pub use field::{hexplane_query, tv_loss, tv_loss_with_grad, FieldShape, HexPlaneField, PLANE_AXES, PLANE_NAMES};
