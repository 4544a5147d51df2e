use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::render::{Camera, Image, DEFAULT_FAR, DEFAULT_NEAR};
use crate::Real;

pub const TRANSFORMS_FILE: &str = "transforms.json";

/// One posed, timestamped image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera_id: usize,
    /// Normalized to [0, 1].
    pub time: Real,
    pub camera: Camera,
    pub image: Image,
    /// Relative to the dataset directory.
    pub file_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub points: Vec<[Real; 3]>,
    pub bbox_min: [Real; 3],
    pub bbox_max: [Real; 3],
}

impl Dataset {
    /// Validates the frames and computes the point-cloud bounding box.
    pub fn new(frames: Vec<Frame>, points: Vec<[Real; 3]>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Domain("dataset has no frames".into()));
        }
        if points.is_empty() {
            return Err(Error::Domain("dataset has no points".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite point".into()));
        }
        for f in &frames {
            if !(0.0..=1.0).contains(&f.time) {
                return Err(Error::Domain(format!("frame {} has time {} outside [0, 1]", f.file_path, f.time)));
            }
            f.camera.validate()?;
            if f.image.width != f.camera.width || f.image.height != f.camera.height {
                return Err(Error::Contract(format!("frame {} image size differs from its camera", f.file_path)));
            }
        }
        let mut lo = [Real::INFINITY; 3];
        let mut hi = [Real::NEG_INFINITY; 3];
        for p in &points {
            for j in 0..3 {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        Ok(Self {
            frames,
            points,
            bbox_min: lo,
            bbox_max: hi,
        })
    }

    /// Distinct camera ids, ascending.
    pub fn camera_ids(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.camera_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Frame indices of one camera, in dataset order.
    pub fn frames_of(&self, camera_id: usize) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].camera_id == camera_id).collect()
    }

    pub fn camera(&self, camera_id: usize) -> Option<&Camera> {
        self.frames.iter().find(|f| f.camera_id == camera_id).map(|f| &f.camera)
    }
}

/// OpenGL-style camera-to-world matrix (x right, y up, z backward).
pub fn camera_to_world_gl(camera: &Camera) -> [[Real; 4]; 4] {
    let r_wc = camera.rotation.transpose();
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][0] = r_wc[(i, 0)];
        m[i][1] = -r_wc[(i, 1)];
        m[i][2] = -r_wc[(i, 2)];
        m[i][3] = camera.center[i];
    }
    m[3][3] = 1.0;
    m
}

fn camera_from_gl(m: &[[Real; 4]; 4], intr: [Real; 4], w: usize, h: usize, time: Real) -> Camera {
    let mut r_wc = Matrix3::zeros();
    for i in 0..3 {
        r_wc[(i, 0)] = m[i][0];
        r_wc[(i, 1)] = -m[i][1];
        r_wc[(i, 2)] = -m[i][2];
    }
    Camera {
        fx: intr[0],
        fy: intr[1],
        cx: intr[2],
        cy: intr[3],
        width: w,
        height: h,
        rotation: r_wc.transpose(),
        center: Vector3::new(m[0][3], m[1][3], m[2][3]),
        timestamp: time,
        near: DEFAULT_NEAR,
        far: DEFAULT_FAR,
    }
}

fn field<'a>(file: &Path, obj: &'a Value, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::parse(file, format!("{ctx}{name}"), "missing"))
}

fn real(file: &Path, obj: &Value, name: &str, ctx: &str) -> Result<Real> {
    let v = field(file, obj, name, ctx)?
        .as_f64()
        .ok_or_else(|| Error::parse(file, format!("{ctx}{name}"), "expected a number"))?;
    if !v.is_finite() {
        return Err(Error::parse(file, format!("{ctx}{name}"), "not finite"));
    }
    Ok(v)
}

fn size(file: &Path, obj: &Value, name: &str, ctx: &str) -> Result<usize> {
    field(file, obj, name, ctx)?
        .as_u64()
        .filter(|&v| v > 0)
        .map(|v| v as usize)
        .ok_or_else(|| Error::parse(file, format!("{ctx}{name}"), "expected a positive integer"))
}

fn matrix4(file: &Path, obj: &Value, ctx: &str) -> Result<[[Real; 4]; 4]> {
    let name = format!("{ctx}transform_matrix");
    let bad = || Error::parse(file, name.clone(), "expected 4 rows of 4 numbers");
    let rows = field(file, obj, "transform_matrix", ctx)?.as_array().ok_or_else(bad)?;
    if rows.len() != 4 {
        return Err(bad());
    }
    let mut m = [[0.0; 4]; 4];
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array().filter(|r| r.len() == 4).ok_or_else(bad)?;
        for (j, v) in row.iter().enumerate() {
            m[i][j] = v.as_f64().filter(|v| v.is_finite()).ok_or_else(bad)?;
        }
    }
    Ok(m)
}

struct RawFrame {
    camera_id: usize,
    time: Real,
    matrix: [[Real; 4]; 4],
    intr: [Real; 4],
    w: usize,
    h: usize,
    file_path: String,
}

/// Reads `transforms.json` and its images from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let file = dir.join(TRANSFORMS_FILE);
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::parse(&file, "<document>", e.to_string()))?;

    let pts = field(&file, &root, "points", "")?
        .as_array()
        .ok_or_else(|| Error::parse(&file, "points", "expected an array"))?;
    let mut points = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        let xyz = p
            .as_array()
            .filter(|a| a.len() == 3)
            .and_then(|a| {
                let v: Option<Vec<Real>> = a.iter().map(|x| x.as_f64().filter(|x| x.is_finite())).collect();
                v
            })
            .ok_or_else(|| Error::parse(&file, format!("points[{i}]"), "expected [x, y, z]"))?;
        points.push([xyz[0], xyz[1], xyz[2]]);
    }
    if points.is_empty() {
        return Err(Error::parse(&file, "points", "no points"));
    }

    let frames_v = field(&file, &root, "frames", "")?
        .as_array()
        .ok_or_else(|| Error::parse(&file, "frames", "expected an array"))?;
    if frames_v.is_empty() {
        return Err(Error::parse(&file, "frames", "no frames"));
    }
    let mut raw = Vec::with_capacity(frames_v.len());
    for (i, f) in frames_v.iter().enumerate() {
        let ctx = format!("frames[{i}].");
        let file_path = field(&file, f, "file_path", &ctx)?
            .as_str()
            .ok_or_else(|| Error::parse(&file, format!("{ctx}file_path"), "expected a string"))?
            .to_string();
        let camera_id = match f.get("camera_id") {
            None => i,
            Some(v) => v
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::parse(&file, format!("{ctx}camera_id"), "expected a non-negative integer"))?,
        };
        let intr = [
            real(&file, f, "fl_x", &ctx)?,
            real(&file, f, "fl_y", &ctx)?,
            real(&file, f, "cx", &ctx)?,
            real(&file, f, "cy", &ctx)?,
        ];
        raw.push(RawFrame {
            camera_id,
            time: real(&file, f, "time", &ctx)?,
            matrix: matrix4(&file, f, &ctx)?,
            intr,
            w: size(&file, f, "w", &ctx)?,
            h: size(&file, f, "h", &ctx)?,
            file_path,
        });
    }

    let t_min = raw.iter().map(|r| r.time).fold(Real::INFINITY, Real::min);
    let t_max = raw.iter().map(|r| r.time).fold(Real::NEG_INFINITY, Real::max);
    let span = t_max - t_min;
    if raw.len() > 1 && !(span > 0.0) {
        return Err(Error::Domain(format!(
            "all {} frames share the timestamp {t_min}; cannot normalize time",
            raw.len()
        )));
    }

    let frames: Vec<Result<Frame>> = raw
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let time = if raw.len() == 1 { 0.0 } else { (r.time - t_min) / span };
            let camera = camera_from_gl(&r.matrix, r.intr, r.w, r.h, time);
            camera
                .validate()
                .map_err(|e| Error::parse(&file, format!("frames[{i}]"), e.to_string()))?;
            let path = dir.join(&r.file_path);
            if !path.is_file() {
                return Err(Error::parse(&file, format!("frames[{i}].file_path"), format!("{} not found", path.display())));
            }
            let img = image::open(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            if img.width() as usize != r.w || img.height() as usize != r.h {
                return Err(Error::parse(
                    &file,
                    format!("frames[{i}].w"),
                    format!("image is {}x{}, frame declares {}x{}", img.width(), img.height(), r.w, r.h),
                ));
            }
            Ok(Frame {
                camera_id: r.camera_id,
                time,
                camera,
                image: Image::from_rgb8(r.w, r.h, img.as_raw())?,
                file_path: r.file_path.clone(),
            })
        })
        .collect();
    Dataset::new(frames.into_iter().collect::<Result<_>>()?, points)
}

/// Writes `transforms.json` and one PNG per frame into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(dataset.frames.len());
    for f in &dataset.frames {
        let path = dir.join(&f.file_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_png(&f.image, &path)?;
        let c = &f.camera;
        frames.push(json!({
            "file_path": f.file_path,
            "camera_id": f.camera_id,
            "time": f.time,
            "transform_matrix": camera_to_world_gl(c),
            "fl_x": c.fx,
            "fl_y": c.fy,
            "cx": c.cx,
            "cy": c.cy,
            "w": c.width,
            "h": c.height,
        }));
    }
    let doc = json!({ "points": dataset.points, "frames": frames });
    let file = dir.join(TRANSFORMS_FILE);
    let text = serde_json::to_string_pretty(&doc).expect("json serializes");
    std::fs::write(&file, text).map_err(|e| Error::io(&file, e))
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
