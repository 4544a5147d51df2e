use crate::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: Real = 1.5;
pub const SSIM_C1: Real = 0.01 * 0.01;
pub const SSIM_C2: Real = 0.03 * 0.03;

fn gaussian_kernel() -> [Real; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as Real;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as Real - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: Real = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable Gaussian blur with zero padding and same-size output. The kernel
/// is symmetric, so this operator is its own transpose.
pub(crate) fn blur(plane: &[Real], w: usize, h: usize) -> Vec<Real> {
    let k = gaussian_kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one channel.
pub(crate) struct PlaneSsim {
    pub ssim: Real,
    pub cs: Real,
    /// d(mean SSIM)/d(x) when requested.
    pub grad: Option<Vec<Real>>,
}

pub(crate) fn ssim_plane(x: &[Real], y: &[Real], w: usize, h: usize, want_grad: bool) -> PlaneSsim {
    let n = (w * h) as Real;
    let mu_x = blur(x, w, h);
    let mu_y = blur(y, w, h);
    let sq = |a: &[Real], b: &[Real]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let e_xx = blur(&sq(x, x), w, h);
    let e_yy = blur(&sq(y, y), w, h);
    let e_xy = blur(&sq(x, y), w, h);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..w * h {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let vx = e_xx[p] - mx * mx;
        let vy = e_yy[p] - my * my;
        let cxy = e_xy[p] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        ssim_sum += s;
        cs_sum += a2 / b2;
        if want_grad {
            d_mu[p] = (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - s * (2.0 * mx / b1 - 2.0 * mx / b2);
            d_exx[p] = -s / b2;
            d_exy[p] = 2.0 * a1 / (b1 * b2);
        }
    }
    let grad = want_grad.then(|| {
        let g_mu = blur(&d_mu, w, h);
        let g_xx = blur(&d_exx, w, h);
        let g_xy = blur(&d_exy, w, h);
        (0..w * h)
            .map(|p| (g_mu[p] + 2.0 * x[p] * g_xx[p] + y[p] * g_xy[p]) / n)
            .collect()
    });
    PlaneSsim {
        ssim: ssim_sum / n,
        cs: cs_sum / n,
        grad,
    }
}
