//! Training losses and image-quality metrics.

mod ssim;

use serde::{Deserialize, Serialize};

pub use ssim::{SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use crate::anchors::NeuralGaussian;
use crate::error::{Error, Result};
use crate::hexplane::{tv_loss_with_grad, HexPlaneField};
use crate::render::Image;
use crate::Real;

/// PSNR reported for identical images.
pub const PSNR_CAP: Real = 100.0;
/// Standard five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [Real; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest side length at which a scale still counts as usable.
pub const MS_SSIM_MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ssim: Real,
    pub tv: Real,
    pub vol: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            tv: 0.0002,
            vol: 0.015,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ssim, self.tv, self.vol].iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Domain(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Mean SSIM over all pixels and channels (11×11 Gaussian window, σ = 1.5,
/// zero padding).
pub fn ssim(a: &Image, b: &Image) -> Result<Real> {
    a.same_shape(b)?;
    Ok((0..3)
        .map(|c| ssim::ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height, false).ssim)
        .sum::<Real>()
        / 3.0)
}

/// SSIM and its gradient w.r.t. the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(Real, Vec<Real>)> {
    a.same_shape(b)?;
    let mut grad = vec![0.0; a.data.len()];
    let mut total = 0.0;
    for c in 0..3 {
        let r = ssim::ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height, true);
        total += r.ssim / 3.0;
        for (p, g) in r.grad.expect("requested").into_iter().enumerate() {
            grad[3 * p + c] = g / 3.0;
        }
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorLoss {
    pub value: Real,
    pub l1: Real,
    pub ssim: Real,
    pub grad: Vec<Real>,
}

/// `L1 + λ_SSIM · (1 − SSIM)` with its gradient w.r.t. `rendered`.
pub fn color_loss(rendered: &Image, target: &Image, lambda_ssim: Real) -> Result<ColorLoss> {
    rendered.same_shape(target)?;
    let n = rendered.data.len() as Real;
    let mut l1 = 0.0;
    let mut grad = vec![0.0; rendered.data.len()];
    for (i, (r, t)) in rendered.data.iter().zip(&target.data).enumerate() {
        let d = r - t;
        l1 += d.abs();
        grad[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    l1 /= n;
    let (s, s_grad) = ssim_with_grad(rendered, target)?;
    for (g, sg) in grad.iter_mut().zip(s_grad) {
        *g -= lambda_ssim * sg;
    }
    Ok(ColorLoss {
        value: l1 + lambda_ssim * (1.0 - s),
        l1,
        ssim: s,
        grad,
    })
}

/// `Σ s_x·s_y·s_z` and its gradient w.r.t. each Gaussian's scale.
pub fn volume_regularization(gaussians: &[NeuralGaussian]) -> (Real, Vec<[Real; 3]>) {
    let mut value = 0.0;
    let grads = gaussians
        .iter()
        .map(|g| {
            let [x, y, z] = g.scale;
            value += x * y * z;
            [y * z, x * z, x * y]
        })
        .collect();
    (value, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: Real,
    pub color: ColorLoss,
    pub tv: Real,
    pub vol: Real,
    /// Gradient w.r.t. the rendered image.
    pub d_image: Vec<Real>,
    /// Gradient w.r.t. the field grids (present when a field was supplied).
    pub d_field: Option<Vec<Real>>,
    /// Gradient w.r.t. each Gaussian's scale.
    pub d_scales: Vec<[Real; 3]>,
}

/// Weighted sum of colour, total-variation and volume terms. Passing no field
/// drops the TV term.
pub fn total_loss(
    rendered: &Image,
    target: &Image,
    field: Option<&HexPlaneField>,
    gaussians: &[NeuralGaussian],
    weights: &LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    let color = color_loss(rendered, target, weights.ssim)?;
    let (tv, d_field) = match field {
        Some(f) => {
            let (v, mut g) = tv_loss_with_grad(f);
            g.iter_mut().for_each(|x| *x *= weights.tv);
            (v, Some(g))
        }
        None => (0.0, None),
    };
    let (vol, mut d_scales) = volume_regularization(gaussians);
    d_scales.iter_mut().flatten().for_each(|x| *x *= weights.vol);
    let value = combine(color.value, tv, vol, weights);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    Ok(TotalLoss {
        value,
        d_image: color.grad.clone(),
        color,
        tv,
        vol,
        d_field,
        d_scales,
    })
}

/// `L_color + λ_tv · L_tv + λ_vol · L_vol`.
pub fn combine(color: Real, tv: Real, vol: Real, weights: &LossWeights) -> Real {
    color + weights.tv * tv + weights.vol * vol
}

pub fn mse(a: &Image, b: &Image) -> Result<Real> {
    a.same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<Real>() / a.data.len() as Real)
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`] for identical images.
pub fn psnr(rendered: &Image, target: &Image) -> Result<Real> {
    let m = mse(rendered, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Number of MS-SSIM scales usable at this image size.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut side = width.min(height);
    let mut n = 0;
    while n < MS_SSIM_WEIGHTS.len() && side >= MS_SSIM_MIN_SIDE {
        n += 1;
        side /= 2;
    }
    n
}

fn downsample(plane: &[Real], w: usize, h: usize) -> (Vec<Real>, usize, usize) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let i = |xx: usize, yy: usize| plane[yy * w + xx];
            out[y * nw + x] = 0.25 * (i(2 * x, 2 * y) + i(2 * x + 1, 2 * y) + i(2 * x, 2 * y + 1) + i(2 * x + 1, 2 * y + 1));
        }
    }
    (out, nw, nh)
}

/// Multi-scale SSIM with 2×2 average pooling between scales. Weights are the
/// standard five, truncated to the usable scale count and renormalized.
pub fn ms_ssim(rendered: &Image, target: &Image) -> Result<Real> {
    rendered.same_shape(target)?;
    let scales = ms_ssim_scales(rendered.width, rendered.height);
    if scales == 0 {
        return Err(Error::Domain(format!(
            "{}x{} is too small for MS-SSIM (need at least {MS_SSIM_MIN_SIDE} pixels per side)",
            rendered.width, rendered.height
        )));
    }
    let weight_sum: Real = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut planes: Vec<(Vec<Real>, Vec<Real>)> = (0..3).map(|c| (rendered.channel(c), target.channel(c))).collect();
    let (mut w, mut h) = (rendered.width, rendered.height);
    let mut result = 1.0;
    for s in 0..scales {
        let (mut ssim_mean, mut cs_mean) = (0.0, 0.0);
        for (x, y) in &planes {
            let r = ssim::ssim_plane(x, y, w, h, false);
            ssim_mean += r.ssim / 3.0;
            cs_mean += r.cs / 3.0;
        }
        let weight = MS_SSIM_WEIGHTS[s] / weight_sum;
        let term = if s + 1 == scales { ssim_mean } else { cs_mean };
        result *= term.max(0.0).powf(weight);
        if s + 1 < scales {
            let mut next = Vec::with_capacity(3);
            let (mut nw, mut nh) = (0, 0);
            for (x, y) in &planes {
                let (dx, a, b) = downsample(x, w, h);
                let (dy, _, _) = downsample(y, w, h);
                (nw, nh) = (a, b);
                next.push((dx, dy));
            }
            planes = next;
            (w, h) = (nw, nh);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quaternion;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|i| ((i * 37) % 101) as Real / 100.0).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = ramp(20, 16);
        let c = color_loss(&a, &a, 0.2).unwrap();
        assert!(c.value.abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = ramp(32, 32);
        assert!((ms_ssim(&b, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_l1() {
        let a = Image::filled(12, 12, [0.5; 3]);
        let b = Image::filled(12, 12, [0.4; 3]);
        let c = color_loss(&a, &b, 0.2).unwrap();
        assert!((c.l1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 5, [0.5; 3]);
        assert!(matches!(psnr(&a, &b), Err(Error::Contract(_))));
        assert!(matches!(color_loss(&a, &b, 0.2), Err(Error::Contract(_))));
    }

    #[test]
    fn ms_ssim_scale_count_and_small_images() {
        assert_eq!(ms_ssim_scales(32, 32), 3);
        assert_eq!(ms_ssim_scales(48, 48), 3);
        assert_eq!(ms_ssim_scales(256, 256), 5);
        let a = Image::filled(6, 6, [0.5; 3]);
        assert!(matches!(ms_ssim(&a, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn inverted_pair_scores_below_identity() {
        let a = ramp(32, 32);
        let inv = Image::new(32, 32, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ms_ssim(&a, &inv).unwrap() < ms_ssim(&a, &a).unwrap());
    }

    fn gaussian(scale: [Real; 3]) -> NeuralGaussian {
        NeuralGaussian {
            position: [0.0; 3],
            rotation: Quaternion::IDENTITY,
            scale,
            color: [0.5; 3],
            opacity: 0.5,
            anchor_id: 0,
            slot: 0,
        }
    }

    #[test]
    fn volume_examples() {
        let unit: Vec<_> = (0..7).map(|_| gaussian([1.0; 3])).collect();
        assert_eq!(volume_regularization(&unit).0, 7.0);
        let (v, g) = volume_regularization(&[gaussian([2.0, 3.0, 4.0])]);
        assert_eq!(v, 24.0);
        assert_eq!(g[0], [12.0, 8.0, 6.0]);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert!((combine(0.5, 10.0, 2.0, &w) - 0.532).abs() < 1e-12);
        assert_eq!(combine(0.0, 0.0, 0.0, &w), 0.0);
    }
}
