//! Dynamic-scene Gaussian splatting from neural voxel anchors and a
//! six-plane space-time deformation field.

pub mod anchors;
pub mod error;
pub mod hexplane;
pub mod io;
pub mod loss;
pub mod math;
pub mod render;
pub mod train;

pub use error::{Error, Result};

/// Scalar type used throughout.
pub type Real = f64;
