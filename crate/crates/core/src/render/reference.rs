use super::raster::{Splat2D, ALPHA_SKIP, SUPPORT_MAHALANOBIS_SQ, TRANSMITTANCE_CUTOFF};
use crate::Real;

/// Untiled rasterizer: every pixel sorts the full splat list and evaluates the
/// compositing sum directly. Used as an oracle for [`super::rasterize`] and to
/// render synthetic ground truth.
pub fn rasterize_reference(splats: &[Splat2D], width: usize, height: usize, background: [Real; 3]) -> Vec<Real> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].source.cmp(&splats[b].source))
            .then(a.cmp(&b))
    });
    let mut image = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as Real + 0.5, y as Real + 0.5);
            let mut transmittance = 1.0;
            let mut rgb = [0.0; 3];
            for &i in &order {
                let s = &splats[i];
                let det = s.cov[0] * s.cov[2] - s.cov[1] * s.cov[1];
                if !(det > 0.0) || !(s.cov[0] > 0.0) || !det.is_finite() {
                    continue;
                }
                let inv = [s.cov[2] / det, -s.cov[1] / det, s.cov[0] / det];
                let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                let maha = inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy;
                if maha > SUPPORT_MAHALANOBIS_SQ {
                    continue;
                }
                let a = s.opacity * (-0.5 * maha).exp();
                if a < ALPHA_SKIP {
                    continue;
                }
                for c in 0..3 {
                    rgb[c] += s.color[c] * (a * transmittance);
                }
                transmittance *= 1.0 - a;
                if transmittance < TRANSMITTANCE_CUTOFF {
                    break;
                }
            }
            let o = 3 * (y * width + x);
            for c in 0..3 {
                image[o + c] = rgb[c] + transmittance * background[c];
            }
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::rasterize;

    #[test]
    fn empty_input_is_background() {
        let img = rasterize_reference(&[], 5, 3, [0.5, 0.25, 0.0]);
        assert!(img.chunks(3).all(|p| p == [0.5, 0.25, 0.0]));
    }

    #[test]
    fn single_splat_bit_identical_to_tiled_single_tile() {
        let s = Splat2D {
            mean: [6.3, 9.1],
            cov: [7.0, 1.2, 3.5],
            depth: 2.0,
            color: [0.9, 0.4, 0.1],
            opacity: 0.8,
            source: 0,
        };
        let reference = rasterize_reference(std::slice::from_ref(&s), 16, 16, [0.1, 0.0, 0.2]);
        let tiled = rasterize(&[s], 16, 16, [0.1, 0.0, 0.2]).unwrap();
        assert_eq!(reference, tiled.image.data);
    }
}
