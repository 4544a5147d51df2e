use rand::Rng;
use rayon::prelude::*;

use super::field::HexPlaneField;
use crate::anchors::{GaussianGrad, NeuralGaussian};
use crate::error::{Error, Result};
use crate::math::{normalize_backward, Activation, Mlp, MlpTape, Quaternion};
use crate::Real;

/// Floor applied to deformed scales.
pub const MIN_SCALE: Real = 1e-6;

/// Gaussians per reduction chunk in the reverse pass. Fixed so the summation
/// order does not depend on the thread count.
const CHUNK: usize = 128;

/// Feature fuser `φ_d` and the three single-layer deformation heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationDecoders {
    pub fuser: Mlp,
    pub position: Mlp,
    pub rotation: Mlp,
    pub scale: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub fuser: Vec<Real>,
    pub position: Vec<Real>,
    pub rotation: Vec<Real>,
    pub scale: Vec<Real>,
}

impl DecoderGrads {
    pub fn zeros(d: &DeformationDecoders) -> Self {
        Self {
            fuser: vec![0.0; d.fuser.num_params()],
            position: vec![0.0; d.position.num_params()],
            rotation: vec![0.0; d.rotation.num_params()],
            scale: vec![0.0; d.scale.num_params()],
        }
    }

    fn add(&mut self, o: &DecoderGrads) {
        for (a, b) in [
            (&mut self.fuser, &o.fuser),
            (&mut self.position, &o.position),
            (&mut self.rotation, &o.rotation),
            (&mut self.scale, &o.scale),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

impl DeformationDecoders {
    /// `φ_d`: `input_dim → hidden (ReLU) → hidden (ReLU)`; heads are
    /// zero-initialized linear maps so the deformation starts as the identity.
    pub fn new(input_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fuser: Mlp::zeros(&[input_dim, hidden, hidden], &[Activation::Relu, Activation::Relu])?,
            position: Mlp::zeros(&[hidden, 3], &[Activation::Identity])?,
            rotation: Mlp::zeros(&[hidden, 4], &[Activation::Identity])?,
            scale: Mlp::zeros(&[hidden, 3], &[Activation::Identity])?,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.fuser.init_glorot(rng);
    }

    pub fn num_params(&self) -> usize {
        self.fuser.num_params() + self.position.num_params() + self.rotation.num_params() + self.scale.num_params()
    }
}

#[derive(Debug, Clone)]
struct GaussianTape {
    fuser: MlpTape,
    position: MlpTape,
    rotation: MlpTape,
    scale: MlpTape,
    raw_rotation: [Real; 4],
    scale_clamped: [bool; 3],
}

/// Cached state of [`deform_gaussians`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct DeformTape {
    time: Real,
    per_gaussian: Vec<GaussianTape>,
    pub clamped_scales: usize,
}

/// Deforms position, rotation and scale of every Gaussian at normalized time
/// `t`. Color and opacity are copied unchanged.
pub fn deform_gaussians(
    gaussians: &[NeuralGaussian],
    field: &HexPlaneField,
    decoders: &DeformationDecoders,
    t: Real,
) -> Result<(Vec<NeuralGaussian>, DeformTape)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("deformation time {t} outside [0, 1]")));
    }
    let results: Vec<Result<(NeuralGaussian, GaussianTape)>> = gaussians
        .par_iter()
        .map(|g| deform_one(g, field, decoders, t))
        .collect();
    let mut out = Vec::with_capacity(gaussians.len());
    let mut per_gaussian = Vec::with_capacity(gaussians.len());
    let mut clamped_scales = 0;
    for r in results {
        let (g, tape) = r?;
        clamped_scales += tape.scale_clamped.iter().filter(|&&c| c).count();
        out.push(g);
        per_gaussian.push(tape);
    }
    if clamped_scales > 0 {
        log::debug!("deform: clamped {clamped_scales} scale components to {MIN_SCALE}");
    }
    Ok((
        out,
        DeformTape {
            time: t,
            per_gaussian,
            clamped_scales,
        },
    ))
}

fn deform_one(
    g: &NeuralGaussian,
    field: &HexPlaneField,
    decoders: &DeformationDecoders,
    t: Real,
) -> Result<(NeuralGaussian, GaussianTape)> {
    let [x, y, z] = g.position;
    let feature = field.query(x, y, z, t)?;
    let fuser = decoders.fuser.forward(&feature)?;
    let fd = fuser.output();
    let position = decoders.position.forward(fd)?;
    let rotation = decoders.rotation.forward(fd)?;
    let scale = decoders.scale.forward(fd)?;
    let (dmu, dr, ds) = (position.output(), rotation.output(), scale.output());

    let q = g.rotation.to_array();
    let raw_rotation = [q[0] + dr[0], q[1] + dr[1], q[2] + dr[2], q[3] + dr[3]];
    let mut scale_clamped = [false; 3];
    let mut new_scale = [0.0; 3];
    for j in 0..3 {
        let s = g.scale[j] + ds[j];
        if s < MIN_SCALE {
            scale_clamped[j] = true;
            new_scale[j] = MIN_SCALE;
        } else {
            new_scale[j] = s;
        }
    }
    let deformed = NeuralGaussian {
        position: [x + dmu[0], y + dmu[1], z + dmu[2]],
        // Keep an untouched rotation bit-exact instead of renormalizing it.
        rotation: if dr.iter().all(|&v| v == 0.0) {
            g.rotation
        } else {
            Quaternion::from_array(raw_rotation).normalized()?
        },
        scale: new_scale,
        color: g.color,
        opacity: g.opacity,
        anchor_id: g.anchor_id,
        slot: g.slot,
    };
    Ok((
        deformed,
        GaussianTape {
            fuser,
            position,
            rotation,
            scale,
            raw_rotation,
            scale_clamped,
        },
    ))
}

/// Reverse of [`deform_gaussians`]. Accumulates field and decoder gradients
/// and returns per-Gaussian gradients w.r.t. the undeformed inputs.
pub fn deform_backward(
    tape: &DeformTape,
    gaussians: &[NeuralGaussian],
    field: &HexPlaneField,
    decoders: &DeformationDecoders,
    d_out: &[GaussianGrad],
    field_grad: &mut [Real],
    decoder_grads: &mut DecoderGrads,
) -> Result<Vec<GaussianGrad>> {
    if d_out.len() != gaussians.len() || tape.per_gaussian.len() != gaussians.len() {
        return Err(Error::Contract("deform backward: mismatched lengths".into()));
    }
    let t = tape.time;
    let chunks: Vec<(Vec<GaussianGrad>, Vec<Real>, DecoderGrads)> = gaussians
        .par_chunks(CHUNK)
        .zip(d_out.par_chunks(CHUNK))
        .zip(tape.per_gaussian.par_chunks(CHUNK))
        .map(|((gs, ds), tapes)| {
            let mut fg = vec![0.0; field_grad.len()];
            let mut dg = DecoderGrads::zeros(decoders);
            let mut out = Vec::with_capacity(gs.len());
            for ((g, d), tp) in gs.iter().zip(ds).zip(tapes) {
                let mut gin = *d;
                // rotation: r' = normalize(r + Δr)
                let d_raw = normalize_backward(tp.raw_rotation, d.rotation);
                gin.rotation = d_raw;
                let mut d_scale_delta = [0.0; 3];
                for j in 0..3 {
                    if tp.scale_clamped[j] {
                        gin.scale[j] = 0.0;
                    } else {
                        d_scale_delta[j] = d.scale[j];
                    }
                }
                let mut d_fd = decoders.position.backward(&tp.position, &d.position, &mut dg.position);
                for (net, tpe, dd, acc) in [
                    (&decoders.rotation, &tp.rotation, &d_raw[..], &mut dg.rotation),
                    (&decoders.scale, &tp.scale, &d_scale_delta[..], &mut dg.scale),
                ] {
                    let v = net.backward(tpe, dd, acc);
                    d_fd.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
                let d_fh = decoders.fuser.backward(&tp.fuser, &d_fd, &mut dg.fuser);
                let [x, y, z] = g.position;
                let d_pos = field.query_backward([x, y, z, t], &d_fh, &mut fg);
                for j in 0..3 {
                    gin.position[j] += d_pos[j];
                }
                out.push(gin);
            }
            (out, fg, dg)
        })
        .collect();
    let mut result = Vec::with_capacity(gaussians.len());
    for (out, fg, dg) in chunks {
        result.extend(out);
        field_grad.iter_mut().zip(&fg).for_each(|(a, b)| *a += b);
        decoder_grads.add(&dg);
    }
    Ok(result)
}
