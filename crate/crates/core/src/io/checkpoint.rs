use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::{Anchor, DensifyStats, GaussianHeads};
use crate::error::{Error, Result};
use crate::hexplane::{DeformationDecoders, FieldShape, HexPlaneField};
use crate::math::{AdamState, Mlp};
use crate::render::Camera;
use crate::train::{CrudeViewDetector, Cursor, Model, Optimizer, RefinementStack, TrainConfig, Trainer};
use crate::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVS4";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
enum Tensor {
    F64(Vec<Real>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Tensor {
    fn tag(&self) -> u8 {
        match self {
            Tensor::F64(_) => 0,
            Tensor::U64(_) => 1,
            Tensor::Bytes(_) => 2,
        }
    }
}

/// Everything that is not a large tensor, stored as one JSON section.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    cursor: Cursor,
    step: u64,
    voxel_size: Real,
    next_anchor_id: u64,
    k: usize,
    feature_dim: usize,
    field_shape: FieldShape,
    bbox_min: [Real; 3],
    bbox_max: [Real; 3],
    detector: CrudeViewDetector,
    stack: RefinementStack,
    cameras: Vec<(usize, Camera)>,
    refine_psnr: (Option<Real>, Option<Real>),
    stats_window_start: u64,
    rng_stream: u64,
    rng_word_pos: String,
}

struct Writer {
    sections: Vec<(String, Tensor)>,
}

impl Writer {
    fn put(&mut self, name: impl Into<String>, t: Tensor) {
        self.sections.push((name.into(), t));
    }

    fn adam(&mut self, name: &str, s: &AdamState) {
        self.put(format!("adam.{name}.m"), Tensor::F64(s.m.clone()));
        self.put(format!("adam.{name}.v"), Tensor::F64(s.v.clone()));
        self.put(format!("adam.{name}.t"), Tensor::U64(vec![s.t]));
        self.put(format!("adam.{name}.hyper"), Tensor::F64(vec![s.beta1, s.beta2, s.eps]));
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.tag());
            match t {
                Tensor::F64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Tensor::U64(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Tensor::Bytes(v) => {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    out.extend_from_slice(v);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }
}

/// Serializes the full training state.
pub fn checkpoint_bytes(trainer: &Trainer) -> Vec<u8> {
    let m = &trainer.model;
    let meta = Meta {
        cursor: trainer.cursor,
        step: trainer.step,
        voxel_size: m.voxel_size,
        next_anchor_id: m.next_anchor_id,
        k: m.k(),
        feature_dim: m.feature_dim(),
        field_shape: m.field.shape().clone(),
        bbox_min: m.field.bbox().0,
        bbox_max: m.field.bbox().1,
        detector: trainer.detector,
        stack: trainer.stack.clone(),
        cameras: trainer.cameras.clone(),
        refine_psnr: trainer.refine_psnr,
        stats_window_start: trainer.stats.window_start,
        rng_stream: trainer.rng.get_stream(),
        rng_word_pos: trainer.rng.get_word_pos().to_string(),
    };
    let mut w = Writer { sections: Vec::new() };
    w.put("config", Tensor::Bytes(serde_json::to_vec(&trainer.config).expect("config serializes")));
    w.put("meta", Tensor::Bytes(serde_json::to_vec(&meta).expect("meta serializes")));
    w.put("rng.seed", Tensor::Bytes(trainer.rng.get_seed().to_vec()));

    let a = &m.anchors;
    w.put("anchors.id", Tensor::U64(a.iter().map(|a| a.id).collect()));
    w.put("anchors.lattice", Tensor::U64(a.iter().flat_map(|a| a.lattice.map(|v| v as u64)).collect()));
    w.put("anchors.center", Tensor::F64(a.iter().flat_map(|a| a.center).collect()));
    w.put("anchors.feature", Tensor::F64(a.iter().flat_map(|a| a.feature.iter().copied()).collect()));
    w.put("anchors.scale", Tensor::F64(a.iter().flat_map(|a| a.scale).collect()));
    w.put("anchors.offsets", Tensor::F64(a.iter().flat_map(|a| a.offsets.iter().flatten().copied()).collect()));

    for (name, net) in [
        ("heads.opacity", &m.heads.opacity),
        ("heads.color", &m.heads.color),
        ("heads.scale", &m.heads.scale),
        ("heads.rotation", &m.heads.rotation),
        ("decoders.fuser", &m.decoders.fuser),
        ("decoders.position", &m.decoders.position),
        ("decoders.rotation", &m.decoders.rotation),
        ("decoders.scale", &m.decoders.scale),
    ] {
        w.put(name, Tensor::F64(net.params().to_vec()));
    }
    w.put("field.grids", Tensor::F64(m.field.params().to_vec()));

    let o = &trainer.optimizer;
    for (name, s) in optimizer_groups(o) {
        w.adam(name, s);
    }

    let s = &trainer.stats;
    w.put("densify.grad_sum", Tensor::F64(s.grad_sum.clone()));
    w.put("densify.grad_count", Tensor::U64(s.grad_count.clone()));
    w.put("densify.opacity_sum", Tensor::F64(s.opacity_sum.clone()));
    w.put("densify.opacity_count", Tensor::U64(s.opacity_count.clone()));
    w.finish()
}

fn optimizer_groups(o: &Optimizer) -> [(&'static str, &AdamState); 12] {
    [
        ("feature", &o.feature),
        ("offsets", &o.offsets),
        ("anchor_scale", &o.anchor_scale),
        ("opacity_head", &o.opacity_head),
        ("color_head", &o.color_head),
        ("scale_head", &o.scale_head),
        ("rotation_head", &o.rotation_head),
        ("grid", &o.grid),
        ("fuser", &o.fuser),
        ("position_decoder", &o.position_decoder),
        ("rotation_decoder", &o.rotation_decoder),
        ("scale_decoder", &o.scale_decoder),
    ]
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(trainer)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("section runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Sections(BTreeMap<String, Tensor>);

impl Sections {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    fn f64(&self, name: &str) -> Result<Vec<Real>> {
        match self.get(name)? {
            Tensor::F64(v) => Ok(v.clone()),
            _ => Err(Error::Checkpoint(format!("section `{name}` is not f64"))),
        }
    }

    fn u64(&self, name: &str) -> Result<Vec<u64>> {
        match self.get(name)? {
            Tensor::U64(v) => Ok(v.clone()),
            _ => Err(Error::Checkpoint(format!("section `{name}` is not u64"))),
        }
    }

    fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name)? {
            Tensor::Bytes(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("section `{name}` is not bytes"))),
        }
    }

    fn sized(&self, name: &str, len: usize) -> Result<Vec<Real>> {
        let v = self.f64(name)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!("section `{name}` has {} values, expected {len}", v.len())));
        }
        Ok(v)
    }

    fn adam(&self, name: &str, len: usize) -> Result<AdamState> {
        let hyper = self.sized(&format!("adam.{name}.hyper"), 3)?;
        let t = self.u64(&format!("adam.{name}.t"))?;
        Ok(AdamState {
            m: self.sized(&format!("adam.{name}.m"), len)?,
            v: self.sized(&format!("adam.{name}.v"), len)?,
            t: *t.first().ok_or_else(|| Error::Checkpoint(format!("empty step counter for {name}")))?,
            beta1: hyper[0],
            beta2: hyper[1],
            eps: hyper[2],
        })
    }

    fn net(&self, name: &str, mut net: Mlp) -> Result<Mlp> {
        let p = self.sized(name, net.num_params())?;
        net.set_params(p)?;
        Ok(net)
    }
}

fn parse_sections(bytes: &[u8]) -> Result<Sections> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("integrity check failed: file is truncated or corrupted".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let count = r.u32()?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let len = r.u64()? as usize;
        let t = match tag {
            0 => Tensor::F64(
                r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("section too large".into()))?)?
                    .chunks_exact(8)
                    .map(|c| Real::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            1 => Tensor::U64(
                r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("section too large".into()))?)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            2 => Tensor::Bytes(r.take(len)?.to_vec()),
            other => return Err(Error::Checkpoint(format!("unknown tensor type {other} in `{name}`"))),
        };
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate section `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last section".into()));
    }
    Ok(Sections(map))
}

/// Restores a trainer from [`checkpoint_bytes`] output.
pub fn trainer_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let s = parse_sections(bytes)?;
    let json_err = |what: &str, e: serde_json::Error| Error::Checkpoint(format!("bad {what} section: {e}"));
    let config: TrainConfig = serde_json::from_slice(s.bytes("config")?).map_err(|e| json_err("config", e))?;
    let meta: Meta = serde_json::from_slice(s.bytes("meta")?).map_err(|e| json_err("meta", e))?;
    let (k, fdim) = (meta.k, meta.feature_dim);

    let ids = s.u64("anchors.id")?;
    let n = ids.len();
    let lattice = s.u64("anchors.lattice")?;
    if lattice.len() != 3 * n {
        return Err(Error::Checkpoint("anchor lattice size mismatch".into()));
    }
    let center = s.sized("anchors.center", 3 * n)?;
    let feature = s.sized("anchors.feature", fdim * n)?;
    let scale = s.sized("anchors.scale", 3 * n)?;
    let offsets = s.sized("anchors.offsets", 3 * k * n)?;
    let anchors = (0..n)
        .map(|i| Anchor {
            id: ids[i],
            lattice: [0, 1, 2].map(|j| lattice[3 * i + j] as i64),
            center: [0, 1, 2].map(|j| center[3 * i + j]),
            feature: feature[i * fdim..(i + 1) * fdim].to_vec(),
            scale: [0, 1, 2].map(|j| scale[3 * i + j]),
            offsets: (0..k).map(|o| [0, 1, 2].map(|j| offsets[(i * k + o) * 3 + j])).collect(),
        })
        .collect();

    let template = GaussianHeads::new(fdim, k, config.model.head_hidden)?;
    let heads = GaussianHeads {
        k,
        opacity: s.net("heads.opacity", template.opacity)?,
        color: s.net("heads.color", template.color)?,
        scale: s.net("heads.scale", template.scale)?,
        rotation: s.net("heads.rotation", template.rotation)?,
    };
    let shape = meta.field_shape.clone();
    let probe = HexPlaneField::new(shape.clone(), meta.bbox_min, meta.bbox_max)?;
    let field = HexPlaneField::from_parts(shape, meta.bbox_min, meta.bbox_max, s.sized("field.grids", probe.num_params())?)?;
    let template = DeformationDecoders::new(field.output_dim(), config.model.fuser_hidden)?;
    let decoders = DeformationDecoders {
        fuser: s.net("decoders.fuser", template.fuser)?,
        position: s.net("decoders.position", template.position)?,
        rotation: s.net("decoders.rotation", template.rotation)?,
        scale: s.net("decoders.scale", template.scale)?,
    };
    let model = Model {
        voxel_size: meta.voxel_size,
        anchors,
        next_anchor_id: meta.next_anchor_id,
        heads,
        field,
        decoders,
    };

    let shape_of = Optimizer::new(&model);
    let mut optimizer = shape_of.clone();
    {
        let groups: Vec<(&'static str, usize)> = optimizer_groups(&shape_of).iter().map(|(n, st)| (*n, st.len())).collect();
        let mut states = Vec::with_capacity(groups.len());
        for (name, len) in groups {
            states.push(s.adam(name, len)?);
        }
        let mut it = states.into_iter();
        let o = &mut optimizer;
        for dst in [
            &mut o.feature,
            &mut o.offsets,
            &mut o.anchor_scale,
            &mut o.opacity_head,
            &mut o.color_head,
            &mut o.scale_head,
            &mut o.rotation_head,
            &mut o.grid,
            &mut o.fuser,
            &mut o.position_decoder,
            &mut o.rotation_decoder,
            &mut o.scale_decoder,
        ] {
            *dst = it.next().expect("one state per group");
        }
    }

    let stats = DensifyStats {
        k,
        grad_sum: s.sized("densify.grad_sum", n * k)?,
        grad_count: s.u64("densify.grad_count")?,
        opacity_sum: s.sized("densify.opacity_sum", n)?,
        opacity_count: s.u64("densify.opacity_count")?,
        window_start: meta.stats_window_start,
    };
    if stats.grad_count.len() != n * k || stats.opacity_count.len() != n {
        return Err(Error::Checkpoint("densify statistics size mismatch".into()));
    }

    let seed: [u8; 32] = s
        .bytes("rng.seed")?
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(
        meta.rng_word_pos
            .parse::<u128>()
            .map_err(|_| Error::Checkpoint("bad rng position".into()))?,
    );
    model.check_finite().map_err(|e| Error::Checkpoint(e.to_string()))?;

    Ok(Trainer {
        config,
        model,
        optimizer,
        stats,
        detector: meta.detector,
        stack: meta.stack,
        cursor: meta.cursor,
        step: meta.step,
        rng,
        cameras: meta.cameras,
        refine_psnr: meta.refine_psnr,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    trainer_from_bytes(&bytes)
}
