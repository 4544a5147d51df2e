use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Frame};
use crate::error::{Error, Result};
use crate::math::{covariance_from_scale_rotation, Quaternion};
use crate::render::{project_gaussian, rasterize_reference, Camera, Image, Splat2D};
use crate::Real;

/// Parameters of a synthetic moving-blob scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub timestamps: usize,
    /// Distance the cluster travels along +x between t = 0 and t = 1.
    pub amplitude: Real,
    pub blobs: usize,
    /// Blob centers are drawn uniformly from a cube of this half-width.
    pub cluster_radius: Real,
    pub blob_scale: [Real; 2],
    pub opacity: Real,
    pub camera_distance: Real,
    pub camera_height: Real,
    /// Angle of the first ring camera around the y axis, radians.
    pub ring_offset: Real,
    /// Focal length as a multiple of the image width.
    pub focal: Real,
    pub background: [Real; 3],
    /// Adds a camera at `hard_distance` looking straight across the motion.
    pub hard_camera: bool,
    pub hard_distance: Real,
    pub points_per_blob: usize,
    /// Number of evenly spaced times at which blobs are sampled for the point
    /// cloud. Fixed, so the cloud does not depend on `timestamps`.
    pub point_times: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            cameras: 4,
            timestamps: 8,
            amplitude: 0.3,
            blobs: 6,
            cluster_radius: 0.35,
            blob_scale: [0.06, 0.14],
            opacity: 0.95,
            camera_distance: 3.0,
            camera_height: 0.8,
            ring_offset: PI / 4.0,
            focal: 1.5,
            background: [0.0; 3],
            hard_camera: false,
            hard_distance: 1.6,
            points_per_blob: 24,
            point_times: 5,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Parse {
            file: "synth spec".into(),
            field: e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default(),
            message: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.cameras + self.hard_camera as usize == 0 {
            return Err(Error::Domain("synthetic scene needs a positive image size and a camera".into()));
        }
        if self.timestamps == 0 || self.blobs == 0 || self.point_times == 0 || self.points_per_blob == 0 {
            return Err(Error::Domain("synthetic scene needs timestamps, blobs and points".into()));
        }
        let [lo, hi] = self.blob_scale;
        if !(lo > 0.0 && hi >= lo) || !self.amplitude.is_finite() || !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Domain("invalid blob parameters".into()));
        }
        if !(self.camera_distance > 0.0 && self.focal > 0.0 && self.hard_distance > 0.0) {
            return Err(Error::Domain("camera distances and focal must be positive".into()));
        }
        Ok(())
    }

    /// Normalized time of timestamp `i`.
    pub fn time(&self, i: usize) -> Real {
        if self.timestamps <= 1 {
            0.0
        } else {
            i as Real / (self.timestamps - 1) as Real
        }
    }

    /// Total camera count, hard camera included.
    pub fn camera_count(&self) -> usize {
        self.cameras + self.hard_camera as usize
    }
}

/// One ground-truth Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub base: [Real; 3],
    pub scale: [Real; 3],
    pub rotation: Quaternion,
    pub color: [Real; 3],
    pub opacity: Real,
    pub phase: Real,
}

impl Blob {
    /// Translation along +x plus a small vertical bob.
    pub fn position(&self, t: Real, amplitude: Real) -> [Real; 3] {
        [
            self.base[0] + amplitude * t,
            self.base[1] + 0.25 * amplitude * (2.0 * PI * t + self.phase).sin(),
            self.base[2],
        ]
    }
}

pub fn synthetic_blobs(spec: &SynthSpec, seed: u64) -> Vec<Blob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.cluster_radius;
    let [lo, hi] = spec.blob_scale;
    (0..spec.blobs)
        .map(|_| {
            let base = [0; 3].map(|_| rng.random_range(-r..=r));
            let scale = [0; 3].map(|_| rng.random_range(lo..=hi));
            let q: [Real; 4] = [0; 4].map(|_| StandardNormal.sample(&mut rng));
            let rotation = Quaternion::from_array(q).normalized().unwrap_or(Quaternion::IDENTITY);
            let color = [0; 3].map(|_| rng.random_range(0.15..=0.95));
            let phase = rng.random_range(0.0..2.0 * PI);
            Blob {
                base,
                scale,
                rotation,
                color,
                opacity: spec.opacity,
                phase,
            }
        })
        .collect()
}

/// Ring cameras around the y axis, then the optional hard camera.
pub fn synthetic_cameras(spec: &SynthSpec) -> Result<Vec<Camera>> {
    let target = Vector3::new(0.5 * spec.amplitude, 0.0, 0.0);
    let up = Vector3::new(0.0, 1.0, 0.0);
    let focal = spec.focal * spec.width as Real;
    let mut cams = Vec::with_capacity(spec.camera_count());
    for i in 0..spec.cameras {
        let a = spec.ring_offset + 2.0 * PI * i as Real / spec.cameras as Real;
        let eye = target + Vector3::new(spec.camera_distance * a.sin(), spec.camera_height, spec.camera_distance * a.cos());
        cams.push(Camera::look_at(eye, target, up, spec.width, spec.height, focal)?);
    }
    if spec.hard_camera {
        let eye = target + Vector3::new(0.0, 0.1 * spec.hard_distance, spec.hard_distance);
        cams.push(Camera::look_at(eye, target, up, spec.width, spec.height, focal)?);
    }
    Ok(cams)
}

/// Renders the blobs at time `t` with the reference rasterizer.
pub fn render_blobs(blobs: &[Blob], amplitude: Real, t: Real, camera: &Camera, background: [Real; 3]) -> Result<Vec<Real>> {
    let mut splats = Vec::with_capacity(blobs.len());
    for (i, b) in blobs.iter().enumerate() {
        let sigma = covariance_from_scale_rotation(b.scale, b.rotation)?;
        if let Some(p) = project_gaussian(&Vector3::from(b.position(t, amplitude)), &sigma, camera) {
            splats.push(Splat2D {
                mean: p.mean,
                cov: p.cov,
                depth: p.depth,
                color: b.color,
                opacity: b.opacity,
                source: i,
            });
        }
    }
    Ok(rasterize_reference(&splats, camera.width, camera.height, background))
}

/// Deterministic dataset of moving blobs seen by a camera ring. Frames are
/// quantized to 8 bits, exactly as they would be read back from PNG.
pub fn generate_synthetic_scene(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let blobs = synthetic_blobs(spec, seed);
    let cameras = synthetic_cameras(spec)?;
    let mut frames = Vec::with_capacity(spec.timestamps * cameras.len());
    for ti in 0..spec.timestamps {
        let t = spec.time(ti);
        for (ci, cam) in cameras.iter().enumerate() {
            let mut camera = cam.clone();
            camera.timestamp = t;
            let data = render_blobs(&blobs, spec.amplitude, t, &camera, spec.background)?;
            let exact = Image::new(spec.width, spec.height, data)?;
            let image = Image::from_rgb8(spec.width, spec.height, &exact.to_rgb8())?;
            frames.push(Frame {
                camera_id: ci,
                time: t,
                camera,
                image,
                file_path: format!("images/c{ci:02}_t{ti:03}.png"),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b10b);
    let mut points = Vec::with_capacity(spec.blobs * spec.point_times * spec.points_per_blob);
    for pi in 0..spec.point_times {
        let t = if spec.point_times == 1 {
            0.0
        } else {
            pi as Real / (spec.point_times - 1) as Real
        };
        for b in &blobs {
            let mu = Vector3::from(b.position(t, spec.amplitude));
            let r = crate::math::quaternion_to_rotation(b.rotation)?;
            for _ in 0..spec.points_per_blob {
                let z: [Real; 3] = [0; 3].map(|j| {
                    let v: Real = StandardNormal.sample(&mut rng);
                    v.clamp(-2.0, 2.0) * b.scale[j]
                });
                let p = mu + r * Vector3::from(z);
                points.push([p.x, p.y, p.z]);
            }
        }
    }
    Dataset::new(frames, points)
}
