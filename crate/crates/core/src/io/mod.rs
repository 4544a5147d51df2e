//! Datasets, synthetic scenes, checkpoints and point export.

mod checkpoint;
mod dataset;
mod ply;
mod synth;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, save_checkpoint, trainer_from_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{camera_to_world_gl, load_dataset, write_dataset, write_png, Dataset, Frame, TRANSFORMS_FILE};
pub use ply::{canonical_camera, export_gaussians, export_snapshot, read_ply, write_ply, PlyGaussian};
pub use synth::{generate_synthetic_scene, render_blobs, synthetic_blobs, synthetic_cameras, Blob, SynthSpec};
