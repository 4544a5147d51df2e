use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::anchors::NeuralGaussian;
use crate::error::{Error, Result};
use crate::math::Quaternion;
use crate::render::Camera;
use crate::train::{decode_view, Trainer};
use crate::Real;

/// Zeroth-order spherical-harmonic basis constant.
const SH_C0: Real = 0.282_094_791_773_878_14;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

/// A Gaussian read back from a PLY file, attributes already activated.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyGaussian {
    pub position: [Real; 3],
    pub scale: [Real; 3],
    pub rotation: [Real; 4],
    pub color: [Real; 3],
    pub opacity: Real,
}

/// A camera that sees the whole field box: placed on the -z side at three
/// box radii and wide enough to contain the box.
pub fn canonical_camera(bbox_min: [Real; 3], bbox_max: [Real; 3]) -> Result<Camera> {
    let lo = Vector3::from(bbox_min);
    let hi = Vector3::from(bbox_max);
    let center = (lo + hi) / 2.0;
    let radius = ((hi - lo).norm() / 2.0).max(1e-6);
    let size = 256;
    let eye = center - Vector3::new(0.0, 0.0, 3.0 * radius);
    let focal = size as Real / 2.0 / 0.75;
    let mut cam = Camera::look_at(eye, center, Vector3::new(0.0, 1.0, 0.0), size, size, focal)?;
    cam.near = (0.01 * radius).min(cam.near);
    cam.far = cam.far.max(10.0 * radius);
    Ok(cam)
}

/// Decodes (and, after stage 1, deforms) every Gaussian visible from the
/// canonical camera at time `t`.
pub fn export_snapshot(trainer: &Trainer, t: Real) -> Result<Vec<NeuralGaussian>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("export time {t} outside [0, 1]")));
    }
    let (lo, hi) = trainer.model.field.bbox();
    let cam = canonical_camera(lo, hi)?;
    decode_view(&trainer.model, &cam, trainer.deformation_active().then_some(t))
}

/// Writes the binary little-endian layout used by Gaussian-splatting viewers.
pub fn write_ply(gaussians: &[NeuralGaussian], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(256 + gaussians.len() * PROPERTIES.len() * 4);
    buf.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    buf.extend_from_slice(format!("element vertex {}\n", gaussians.len()).as_bytes());
    for p in PROPERTIES {
        buf.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    buf.extend_from_slice(b"end_header\n");
    for g in gaussians {
        let o = g.opacity.clamp(1e-7, 1.0 - 1e-7);
        let q = g.rotation.to_array();
        let values: [Real; 17] = [
            g.position[0],
            g.position[1],
            g.position[2],
            0.0,
            0.0,
            0.0,
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
            (o / (1.0 - o)).ln(),
            g.scale[0].ln(),
            g.scale[1].ln(),
            g.scale[2].ln(),
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Snapshot at time `t` written to `path`; returns the record count.
pub fn export_gaussians(trainer: &Trainer, t: Real, path: impl AsRef<Path>) -> Result<usize> {
    let gs = export_snapshot(trainer, t)?;
    write_ply(&gs, path)?;
    Ok(gs.len())
}

/// Reads files written by [`write_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<PlyGaussian>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut count = None;
    let mut props = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::parse(path, "header", "missing end_header"));
        }
        let l = line.trim_end();
        if l == "end_header" {
            break;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["ply"] | ["comment", ..] => {}
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(Error::parse(path, "format", format!("unsupported format {fmt}")));
            }
            ["format", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::parse(path, "element vertex", "bad count"))?);
            }
            ["property", "float", name] => props.push(name.to_string()),
            _ => return Err(Error::parse(path, "header", format!("unexpected line `{l}`"))),
        }
    }
    let count = count.ok_or_else(|| Error::parse(path, "element vertex", "missing"))?;
    if props != PROPERTIES {
        return Err(Error::parse(path, "property", "unexpected property layout"));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    if data.len() != count * PROPERTIES.len() * 4 {
        return Err(Error::parse(path, "body", "size does not match the vertex count"));
    }
    Ok(data
        .chunks_exact(PROPERTIES.len() * 4)
        .map(|rec| {
            let v: Vec<Real> = rec
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
                .collect();
            let sig = |x: Real| 1.0 / (1.0 + (-x).exp());
            PlyGaussian {
                position: [v[0], v[1], v[2]],
                color: [v[6] * SH_C0 + 0.5, v[7] * SH_C0 + 0.5, v[8] * SH_C0 + 0.5],
                opacity: sig(v[9]),
                scale: [v[10].exp(), v[11].exp(), v[12].exp()],
                rotation: [v[13], v[14], v[15], v[16]],
            }
        })
        .collect())
}

impl PlyGaussian {
    pub fn quaternion(&self) -> Quaternion {
        Quaternion::from_array(self.rotation)
    }
}
