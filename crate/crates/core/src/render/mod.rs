//! Projection of 3D Gaussians and differentiable tile-based α-blending.

mod camera;
mod image;
mod project;
mod raster;
mod reference;

pub use image::Image;
pub use camera::{Camera, Plane, DEFAULT_FAR, DEFAULT_NEAR};
pub use project::{project_backward, project_gaussian, Projection, COV2D_FLOOR};
pub use raster::{
    rasterize, rasterize_backward, RenderOutput, Splat2D, SplatGrad, ALPHA_SKIP, SUPPORT_MAHALANOBIS_SQ,
    TILE_SIZE, TRANSMITTANCE_CUTOFF,
};
pub use reference::rasterize_reference;
