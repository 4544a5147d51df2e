use rayon::prelude::*;

use super::image::Image;
use crate::error::{Error, Result};
use crate::Real;

pub const TILE_SIZE: usize = 16;
/// Contributions below this alpha are skipped.
pub const ALPHA_SKIP: Real = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_CUTOFF: Real = 1e-4;
/// Squared Mahalanobis radius of a splat's support (3σ).
pub const SUPPORT_MAHALANOBIS_SQ: Real = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: [Real; 2],
    /// (xx, xy, yy)
    pub cov: [Real; 3],
    pub depth: Real,
    pub color: [Real; 3],
    pub opacity: Real,
    pub source: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [Real; 2],
    /// Derivatives w.r.t. (xx, xy, yy), xy being the single shared off-diagonal.
    pub cov: [Real; 3],
    pub color: [Real; 3],
    pub opacity: Real,
}

/// Inverse covariance and screen bounds, computed once per splat.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Prepared {
    pub conic: [Real; 3],
    pub valid: bool,
    pub tile_min: [usize; 2],
    pub tile_max: [usize; 2],
}

pub(crate) fn conic_of(cov: [Real; 3]) -> Option<[Real; 3]> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !(cov[0] > 0.0) || !det.is_finite() {
        return None;
    }
    Some([cov[2] / det, -cov[1] / det, cov[0] / det])
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub image: Image,
    /// Per-pixel accumulated alpha, `1 - final transmittance`.
    pub alpha: Vec<Real>,
    pub final_transmittance: Vec<Real>,
    pub background: [Real; 3],
    /// Splats with non-positive covariance determinant.
    pub skipped_singular: usize,
    splats: Vec<Splat2D>,
    prepared: Vec<Prepared>,
    /// Per tile, splat indices sorted front to back.
    tile_lists: Vec<Vec<u32>>,
}

impl RenderOutput {
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }

    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(TILE_SIZE)
    }

    pub fn tile_lists(&self) -> &[Vec<u32>] {
        &self.tile_lists
    }

    pub fn pixel(&self, x: usize, y: usize) -> [Real; 3] {
        self.image.pixel(x, y)
    }

    /// Hash of which splats contribute to which pixel. Two renders with equal
    /// signatures took the same branches at every skip and cutoff gate.
    pub fn contribution_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        let mut contributors = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                contributors.clear();
                let list = &self.tile_lists[self.tile_of(x, y)];
                composite_pixel(&self.splats, &self.prepared, list, x, y, &mut |c| {
                    contributors.push(c.index)
                });
                contributors.hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    fn tile_of(&self, x: usize, y: usize) -> usize {
        (y / TILE_SIZE) * self.tiles_x() + x / TILE_SIZE
    }
}

/// One compositing step seen by the per-pixel kernel.
pub(crate) struct Contribution {
    pub index: u32,
    pub alpha: Real,
    pub gauss: Real,
    pub transmittance: Real,
    pub dx: Real,
    pub dy: Real,
}

/// Front-to-back compositing of one pixel over a sorted list. Calls `visit`
/// for every contributing splat and returns (color without background, final T).
fn composite_pixel(
    splats: &[Splat2D],
    prepared: &[Prepared],
    list: &[u32],
    x: usize,
    y: usize,
    visit: &mut dyn FnMut(&Contribution),
) -> ([Real; 3], Real) {
    let px = x as Real + 0.5;
    let py = y as Real + 0.5;
    let mut t = 1.0;
    let mut color = [0.0; 3];
    for &idx in list {
        let s = &splats[idx as usize];
        let k = prepared[idx as usize].conic;
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let m2 = k[0] * dx * dx + 2.0 * k[1] * dx * dy + k[2] * dy * dy;
        if m2 > SUPPORT_MAHALANOBIS_SQ {
            continue;
        }
        let gauss = (-0.5 * m2).exp();
        let alpha = s.opacity * gauss;
        if alpha < ALPHA_SKIP {
            continue;
        }
        visit(&Contribution {
            index: idx,
            alpha,
            gauss,
            transmittance: t,
            dx,
            dy,
        });
        let w = alpha * t;
        for c in 0..3 {
            color[c] += s.color[c] * w;
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    (color, t)
}

fn prepare(splats: &[Splat2D], width: usize, height: usize) -> (Vec<Prepared>, usize) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut singular = 0;
    let prepared = splats
        .iter()
        .map(|s| {
            let invalid = Prepared {
                conic: [0.0; 3],
                valid: false,
                tile_min: [0, 0],
                tile_max: [0, 0],
            };
            let Some(conic) = conic_of(s.cov) else {
                singular += 1;
                return invalid;
            };
            let rx = SUPPORT_MAHALANOBIS_SQ.sqrt() * s.cov[0].sqrt();
            let ry = SUPPORT_MAHALANOBIS_SQ.sqrt() * s.cov[2].sqrt();
            // pixel centers sit at i + 0.5
            let x0 = (s.mean[0] - rx - 0.5).floor();
            let x1 = (s.mean[0] + rx - 0.5).ceil();
            let y0 = (s.mean[1] - ry - 0.5).floor();
            let y1 = (s.mean[1] + ry - 0.5).ceil();
            if x1 < 0.0 || y1 < 0.0 || x0 >= width as Real || y0 >= height as Real || s.opacity < ALPHA_SKIP {
                return invalid;
            }
            let clamp_tile = |v: Real, n: usize| ((v.max(0.0) as usize) / TILE_SIZE).min(n - 1);
            Prepared {
                conic,
                valid: true,
                tile_min: [clamp_tile(x0, tiles_x), clamp_tile(y0, tiles_y)],
                tile_max: [clamp_tile(x1, tiles_x), clamp_tile(y1, tiles_y)],
            }
        })
        .collect();
    (prepared, singular)
}

/// Orders splats front to back, ties broken by source index.
pub(crate) fn depth_order(splats: &[Splat2D], a: u32, b: u32) -> std::cmp::Ordering {
    let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
    sa.depth
        .total_cmp(&sb.depth)
        .then(sa.source.cmp(&sb.source))
        .then(a.cmp(&b))
}

/// Tile-based α-blending of `splats` into a `width × height` image.
pub fn rasterize(splats: &[Splat2D], width: usize, height: usize, background: [Real; 3]) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::Domain("image size must be positive".into()));
    }
    if splats.iter().any(|s| {
        !(s.mean.iter().chain(&s.cov).chain(&s.color).all(|v| v.is_finite())
            && s.depth.is_finite()
            && s.opacity.is_finite())
    }) {
        return Err(Error::Numeric("non-finite splat".into()));
    }
    let (prepared, skipped_singular) = prepare(splats, width, height);
    if skipped_singular > 0 {
        log::debug!("rasterize: skipped {skipped_singular} singular splats");
    }
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in prepared.iter().enumerate() {
        if !p.valid {
            continue;
        }
        for ty in p.tile_min[1]..=p.tile_max[1] {
            for tx in p.tile_min[0]..=p.tile_max[0] {
                tile_lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    tile_lists
        .par_iter_mut()
        .for_each(|list| list.sort_by(|&a, &b| depth_order(splats, a, b)));

    let blocks: Vec<Vec<([Real; 3], Real)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &tile_lists[tile];
            let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                    out.push(composite_pixel(splats, &prepared, list, x, y, &mut |_| {}));
                }
            }
            out
        })
        .collect();

    let mut image = vec![0.0; width * height * 3];
    let mut alpha = vec![0.0; width * height];
    let mut final_transmittance = vec![0.0; width * height];
    for (tile, block) in blocks.into_iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut it = block.into_iter();
        for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
            for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                let (color, t) = it.next().expect("block covers tile");
                let p = y * width + x;
                for c in 0..3 {
                    image[3 * p + c] = color[c] + t * background[c];
                }
                alpha[p] = 1.0 - t;
                final_transmittance[p] = t;
            }
        }
    }
    Ok(RenderOutput {
        width,
        height,
        image: Image { width, height, data: image },
        alpha,
        final_transmittance,
        background,
        skipped_singular,
        splats: splats.to_vec(),
        prepared,
        tile_lists,
    })
}

/// Exact reverse of [`rasterize`]'s compositing. Skipped and post-cutoff terms
/// receive zero gradient. Per-tile partial sums are merged in tile order.
pub fn rasterize_backward(output: &RenderOutput, d_image: &[Real]) -> Result<Vec<SplatGrad>> {
    let (w, h) = (output.width, output.height);
    if d_image.len() != w * h * 3 {
        return Err(Error::Contract(format!(
            "image gradient has {} entries, expected {}",
            d_image.len(),
            w * h * 3
        )));
    }
    if output.prepared.len() != output.splats.len() || output.tile_lists.len() != output.tiles_x() * h.div_ceil(TILE_SIZE) {
        return Err(Error::Contract("render output lacks its backward buffers".into()));
    }
    let tiles_x = output.tiles_x();
    let splats = &output.splats;
    let bg = output.background;

    let partials: Vec<Vec<(u32, SplatGrad)>> = output
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut local = vec![SplatGrad::default(); list.len()];
            let mut slot_of = std::collections::HashMap::with_capacity(list.len());
            for (slot, &idx) in list.iter().enumerate() {
                slot_of.insert(idx, slot);
            }
            let mut conic_grad = vec![[0.0 as Real; 3]; list.len()];
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let p = y * w + x;
                    let dc = [d_image[3 * p], d_image[3 * p + 1], d_image[3 * p + 2]];
                    if dc == [0.0; 3] {
                        continue;
                    }
                    contribs.clear();
                    composite_pixel(splats, &output.prepared, list, x, y, &mut |c| {
                        contribs.push(Contribution { ..*c })
                    });
                    let mut acc = bg;
                    for c in contribs.iter().rev() {
                        let s = &splats[c.index as usize];
                        let slot = slot_of[&c.index];
                        let g = &mut local[slot];
                        let weight = c.alpha * c.transmittance;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            g.color[ch] += dc[ch] * weight;
                            d_alpha += dc[ch] * (s.color[ch] - acc[ch]);
                            acc[ch] = s.color[ch] * c.alpha + (1.0 - c.alpha) * acc[ch];
                        }
                        d_alpha *= c.transmittance;
                        g.opacity += d_alpha * c.gauss;
                        let d_m2 = -0.5 * d_alpha * s.opacity * c.gauss;
                        let k = output.prepared[c.index as usize].conic;
                        let kg = &mut conic_grad[slot];
                        kg[0] += d_m2 * c.dx * c.dx;
                        kg[1] += d_m2 * 2.0 * c.dx * c.dy;
                        kg[2] += d_m2 * c.dy * c.dy;
                        let d_dx = d_m2 * 2.0 * (k[0] * c.dx + k[1] * c.dy);
                        let d_dy = d_m2 * 2.0 * (k[1] * c.dx + k[2] * c.dy);
                        g.mean[0] -= d_dx;
                        g.mean[1] -= d_dy;
                    }
                }
            }
            for (slot, &idx) in list.iter().enumerate() {
                local[slot].cov = conic_to_cov_grad(output.prepared[idx as usize].conic, conic_grad[slot]);
            }
            list.iter().copied().zip(local).collect()
        })
        .collect();

    let mut grads = vec![SplatGrad::default(); splats.len()];
    for tile in partials {
        for (idx, g) in tile {
            let dst = &mut grads[idx as usize];
            for i in 0..2 {
                dst.mean[i] += g.mean[i];
            }
            for i in 0..3 {
                dst.cov[i] += g.cov[i];
                dst.color[i] += g.color[i];
            }
            dst.opacity += g.opacity;
        }
    }
    Ok(grads)
}

/// Maps gradients w.r.t. the conic (A, B, C), B shared off-diagonal, to the
/// covariance (xx, xy, yy) in the same convention. Uses dΣ = −K dK K.
fn conic_to_cov_grad(k: [Real; 3], dk: [Real; 3]) -> [Real; 3] {
    let km = nalgebra::Matrix2::new(k[0], k[1], k[1], k[2]);
    let gk = nalgebra::Matrix2::new(dk[0], 0.5 * dk[1], 0.5 * dk[1], dk[2]);
    let gs = -(km * gk * km);
    [gs[(0, 0)], gs[(0, 1)] + gs[(1, 0)], gs[(1, 1)]]
}
