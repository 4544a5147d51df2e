use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::model::{Gradients, Model};
use crate::anchors::{cull_visible, spawn_backward, spawn_gaussians, GaussianGrad, HeadGrads, NeuralGaussian, SpawnTape};
use crate::error::{Error, Result};
use crate::hexplane::{deform_backward, deform_gaussians, DeformTape};
use crate::math::{covariance_backward, covariance_from_scale_rotation};
use crate::render::{project_backward, project_gaussian, rasterize, rasterize_backward, Camera, Image, Projection, RenderOutput, Splat2D};
use crate::Real;

/// Anchors per reduction chunk in the spawn reverse pass.
const ANCHOR_CHUNK: usize = 32;

/// Forward state of one rendered view.
#[derive(Debug, Clone)]
pub struct ViewRender {
    /// Indices of the anchors that passed culling.
    pub visible: Vec<usize>,
    /// Gaussians decoded from the visible anchors, `k` per anchor.
    pub canonical: Vec<NeuralGaussian>,
    spawn_tapes: Vec<SpawnTape>,
    deformed: Option<(Vec<NeuralGaussian>, DeformTape)>,
    time: Option<Real>,
    projections: Vec<Option<(Projection, Matrix3<Real>)>>,
    /// Gaussian index of each splat.
    splat_gaussian: Vec<usize>,
    pub output: RenderOutput,
}

impl ViewRender {
    /// The Gaussians that were splatted (deformed when a time was given).
    pub fn gaussians(&self) -> &[NeuralGaussian] {
        match &self.deformed {
            Some((g, _)) => g,
            None => &self.canonical,
        }
    }

    pub fn image(&self) -> &Image {
        &self.output.image
    }

    pub fn time(&self) -> Option<Real> {
        self.time
    }

    pub fn splat_count(&self) -> usize {
        self.splat_gaussian.len()
    }
}

/// Culls, decodes, optionally deforms to time `t`, projects and rasterizes.
pub fn render_view(model: &Model, camera: &Camera, t: Option<Real>, background: [Real; 3]) -> Result<ViewRender> {
    camera.validate()?;
    let visible = cull_visible(&model.anchors, camera);
    let spawned: Vec<Result<(Vec<NeuralGaussian>, SpawnTape)>> = visible
        .par_iter()
        .map(|&i| spawn_gaussians(&model.anchors[i], &model.heads, camera))
        .collect();
    let mut canonical = Vec::with_capacity(visible.len() * model.k());
    let mut spawn_tapes = Vec::with_capacity(visible.len());
    for r in spawned {
        let (gs, tape) = r?;
        canonical.extend(gs);
        spawn_tapes.push(tape);
    }
    let deformed = match t {
        Some(t) if !canonical.is_empty() => Some(deform_gaussians(&canonical, &model.field, &model.decoders, t)?),
        Some(t) if !(0.0..=1.0).contains(&t) => {
            return Err(Error::Domain(format!("render time {t} outside [0, 1]")));
        }
        _ => None,
    };
    let gaussians = deformed.as_ref().map_or(&canonical, |(g, _)| g);

    let projected: Vec<Result<Option<(Projection, Matrix3<Real>)>>> = gaussians
        .par_iter()
        .map(|g| {
            let sigma = covariance_from_scale_rotation(g.scale, g.rotation)?;
            Ok(project_gaussian(&Vector3::from(g.position), &sigma, camera).map(|p| (p, sigma)))
        })
        .collect();
    let mut projections = Vec::with_capacity(gaussians.len());
    let mut splats = Vec::new();
    let mut splat_gaussian = Vec::new();
    for (i, r) in projected.into_iter().enumerate() {
        let p = r?;
        if let Some((proj, _)) = &p {
            let g = &gaussians[i];
            splats.push(Splat2D {
                mean: proj.mean,
                cov: proj.cov,
                depth: proj.depth,
                color: g.color,
                opacity: g.opacity,
                source: i,
            });
            splat_gaussian.push(i);
        }
        projections.push(p);
    }
    let output = rasterize(&splats, camera.width, camera.height, background)?;
    Ok(ViewRender {
        visible,
        canonical,
        spawn_tapes,
        deformed,
        time: t,
        projections,
        splat_gaussian,
        output,
    })
}

/// Gaussians of the anchors visible from `camera`, deformed to `t` when given.
pub fn decode_view(model: &Model, camera: &Camera, t: Option<Real>) -> Result<Vec<NeuralGaussian>> {
    camera.validate()?;
    let visible = cull_visible(&model.anchors, camera);
    let spawned: Vec<Result<Vec<NeuralGaussian>>> = visible
        .par_iter()
        .map(|&i| Ok(spawn_gaussians(&model.anchors[i], &model.heads, camera)?.0))
        .collect();
    let mut out = Vec::with_capacity(visible.len() * model.k());
    for r in spawned {
        out.extend(r?);
    }
    match t {
        Some(t) => Ok(deform_gaussians(&out, &model.field, &model.decoders, t)?.0),
        None => Ok(out),
    }
}

/// Per-Gaussian view-space position-gradient norms, in normalized device units.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGradStats {
    /// `None` for Gaussians that produced no splat.
    pub viewspace: Vec<Option<Real>>,
    /// Mean over splatted Gaussians (0 when none).
    pub mean_viewspace: Real,
}

/// Reverse pass of [`render_view`]. `d_image` is the loss gradient w.r.t. the
/// rendered image and `d_scales` an extra gradient w.r.t. each rendered
/// Gaussian's scale (may be empty). Gradients are accumulated into `grads`.
pub fn backward_view(
    model: &Model,
    view: &ViewRender,
    camera: &Camera,
    d_image: &[Real],
    d_scales: &[[Real; 3]],
    grads: &mut Gradients,
) -> Result<ViewGradStats> {
    let gaussians = view.gaussians();
    if !d_scales.is_empty() && d_scales.len() != gaussians.len() {
        return Err(Error::Contract("scale gradient count differs from Gaussian count".into()));
    }
    let splat_grads = rasterize_backward(&view.output, d_image)?;
    let mut g_out = vec![GaussianGrad::default(); gaussians.len()];
    let mut viewspace = vec![None; gaussians.len()];
    let half = [camera.width as Real / 2.0, camera.height as Real / 2.0];
    let mut norm_sum = 0.0;
    for (s, sg) in splat_grads.iter().enumerate() {
        let gi = view.splat_gaussian[s];
        let g = &gaussians[gi];
        let (proj, sigma) = view.projections[gi].as_ref().expect("splatted Gaussian has a projection");
        let (d_mu, d_sigma) = project_backward(proj, sigma, camera, sg.mean, sg.cov);
        let (d_s, d_q) = covariance_backward(g.scale, g.rotation, &d_sigma)?;
        let out = &mut g_out[gi];
        out.position = [d_mu.x, d_mu.y, d_mu.z];
        out.rotation = d_q;
        out.scale = d_s;
        out.color = sg.color;
        out.opacity = sg.opacity;
        let n = ((sg.mean[0] * half[0]).powi(2) + (sg.mean[1] * half[1]).powi(2)).sqrt();
        viewspace[gi] = Some(n);
        norm_sum += n;
    }
    for (out, d) in g_out.iter_mut().zip(d_scales) {
        for j in 0..3 {
            out.scale[j] += d[j];
        }
    }
    let canonical_grads = match &view.deformed {
        Some((_, tape)) => deform_backward(
            tape,
            &view.canonical,
            &model.field,
            &model.decoders,
            &g_out,
            &mut grads.field,
            &mut grads.decoders,
        )?,
        None => g_out,
    };

    let k = model.k();
    let fdim = model.feature_dim();
    let chunks: Vec<(HeadGrads, Vec<(usize, crate::anchors::AnchorGrad)>)> = view
        .visible
        .par_chunks(ANCHOR_CHUNK)
        .enumerate()
        .map(|(c, idx)| {
            let mut hg = HeadGrads::zeros(&model.heads);
            let per = idx
                .iter()
                .enumerate()
                .map(|(j, &ai)| {
                    let v = c * ANCHOR_CHUNK + j;
                    let range = v * k..(v + 1) * k;
                    let ag = spawn_backward(
                        &model.anchors[ai],
                        &model.heads,
                        &view.spawn_tapes[v],
                        &view.canonical[range.clone()],
                        &canonical_grads[range],
                        &mut hg,
                    );
                    (ai, ag)
                })
                .collect();
            (hg, per)
        })
        .collect();
    for (hg, per) in chunks {
        grads.heads.add(&hg);
        for (ai, ag) in per {
            let a = &model.anchors[ai];
            for (dst, src) in grads.feature[ai * fdim..(ai + 1) * fdim].iter_mut().zip(&ag.feature) {
                *dst += src;
            }
            for (slot, o) in ag.offsets.iter().enumerate() {
                for j in 0..3 {
                    grads.offsets[(ai * k + slot) * 3 + j] += o[j];
                }
            }
            for j in 0..3 {
                grads.log_scale[ai * 3 + j] += ag.scale[j] * a.scale[j];
            }
        }
    }
    let count = view.splat_gaussian.len();
    Ok(ViewGradStats {
        viewspace,
        mean_viewspace: if count > 0 { norm_sum / count as Real } else { 0.0 },
    })
}
