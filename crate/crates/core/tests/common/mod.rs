//! Central finite-difference oracles shared by the gradient suite and the
//! acceptance target. Every check builds a scalar loss `L = Σ w·output` with
//! random weights `w`, runs the analytic reverse pass with `w` as the upstream
//! gradient, and compares against `(L(x+h) - L(x-h)) / 2h` for each input.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use nvs4d::anchors::{spawn_backward, spawn_gaussians, Anchor, GaussianGrad, GaussianHeads, HeadGrads, NeuralGaussian};
use nvs4d::hexplane::{deform_backward, deform_gaussians, tv_loss_with_grad, DecoderGrads, DeformationDecoders, FieldShape, HexPlaneField};
use nvs4d::loss::{color_loss, volume_regularization};
use nvs4d::math::{Activation, Mlp, Quaternion};
use nvs4d::render::{project_backward, project_gaussian, rasterize, rasterize_backward, Camera, Image, Splat2D};
use nvs4d::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: Real = 1e-6;
pub const SEEDS: u64 = 100;
pub const TOL: Real = 1e-4;
pub const RASTER_TOL: Real = 1e-3;

/// Max abs difference divided by the largest magnitude in either vector.
pub fn rel_err(analytic: &[Real], numeric: &[Real]) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Central differences of `f` at `x` over the coordinates in `which`.
pub fn numeric_grad(f: &mut dyn FnMut(&[Real]) -> Real, x: &[Real], which: &[usize]) -> Vec<Real> {
    let mut p = x.to_vec();
    which
        .iter()
        .map(|&i| {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, a: Real) -> Vec<Real> {
    (0..n).map(|_| r.random_range(-a..a)).collect()
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Worst relative error over `seeds` runs of `check`.
pub fn worst(seeds: u64, check: fn(u64) -> Real) -> Real {
    (0..seeds).map(check).fold(0.0, Real::max)
}

pub fn check_mlp(seed: u64) -> Real {
    let mut r = rng(seed);
    let dims = [5, 7, 6, 4];
    let mut net = Mlp::zeros(&dims, &[Activation::Relu, Activation::Relu, Activation::Identity]).unwrap();
    let np = net.num_params();
    net.set_params(uniform(&mut r, np, 0.8)).unwrap();
    let input = uniform(&mut r, dims[0], 1.0);
    let w = uniform(&mut r, dims[3], 1.0);

    let tape = net.forward(&input).unwrap();
    let mut g = vec![0.0; np];
    let d_in = net.backward(&tape, &w, &mut g);
    let mut analytic = g;
    analytic.extend(d_in);

    let mut x = net.params().to_vec();
    x.extend(&input);
    let mut f = |p: &[Real]| {
        let mut n = net.clone();
        n.set_params(p[..np].to_vec()).unwrap();
        dot(&n.eval(&p[np..]).unwrap(), &w)
    };
    rel_err(&analytic, &numeric_grad(&mut f, &x, &all(x.len())))
}

pub fn test_camera(eye: [Real; 3], size: usize) -> Camera {
    Camera::look_at(
        Vector3::from(eye),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        size,
        size,
        size as Real,
    )
    .unwrap()
}

fn random_heads(r: &mut ChaCha8Rng, fdim: usize, k: usize, hidden: usize) -> GaussianHeads {
    let mut heads = GaussianHeads::new(fdim, k, hidden).unwrap();
    heads.init(r, 0.5);
    for net in [&mut heads.opacity, &mut heads.color, &mut heads.scale, &mut heads.rotation] {
        let noise = uniform(r, net.num_params(), 0.3);
        let p: Vec<Real> = net.params().iter().zip(noise).map(|(a, b)| a + b).collect();
        net.set_params(p).unwrap();
    }
    heads
}

fn gaussian_loss(gs: &[NeuralGaussian], w: &[GaussianGrad]) -> Real {
    gs.iter()
        .zip(w)
        .map(|(g, w)| {
            dot(&g.position, &w.position)
                + dot(&g.rotation.to_array(), &w.rotation)
                + dot(&g.scale, &w.scale)
                + dot(&g.color, &w.color)
                + g.opacity * w.opacity
        })
        .sum()
}

fn random_gaussian_grads(r: &mut ChaCha8Rng, n: usize) -> Vec<GaussianGrad> {
    (0..n)
        .map(|_| GaussianGrad {
            position: [0; 3].map(|_| r.random_range(-1.0..1.0)),
            rotation: [0; 4].map(|_| r.random_range(-1.0..1.0)),
            scale: [0; 3].map(|_| r.random_range(-1.0..1.0)),
            color: [0; 3].map(|_| r.random_range(-1.0..1.0)),
            opacity: r.random_range(-1.0..1.0),
        })
        .collect()
}

pub fn check_spawn(seed: u64) -> Real {
    let mut r = rng(seed);
    let (fdim, k, hidden) = (6, 3, 6);
    let heads = random_heads(&mut r, fdim, k, hidden);
    let mut anchor = Anchor::new(7, [1, -2, 3], 0.1, uniform(&mut r, fdim, 1.0), k);
    for o in &mut anchor.offsets {
        *o = [0; 3].map(|_| r.random_range(-1.0..1.0));
    }
    anchor.scale = [0; 3].map(|_| r.random_range(0.05..0.2));
    let cam = test_camera([r.random_range(-1.0..1.0), 0.5, 3.0], 32);
    let w = random_gaussian_grads(&mut r, k);

    let (gs, tape) = spawn_gaussians(&anchor, &heads, &cam).unwrap();
    let mut hg = HeadGrads::zeros(&heads);
    let ag = spawn_backward(&anchor, &heads, &tape, &gs, &w, &mut hg);
    let mut analytic = ag.feature.clone();
    analytic.extend(ag.offsets.iter().flatten());
    analytic.extend(ag.scale);
    for v in [&hg.opacity, &hg.color, &hg.scale, &hg.rotation] {
        analytic.extend(v);
    }

    let sizes = [
        heads.opacity.num_params(),
        heads.color.num_params(),
        heads.scale.num_params(),
        heads.rotation.num_params(),
    ];
    let mut x = anchor.feature.clone();
    x.extend(anchor.offsets.iter().flatten());
    x.extend(anchor.scale);
    for net in [&heads.opacity, &heads.color, &heads.scale, &heads.rotation] {
        x.extend(net.params());
    }
    let mut f = |p: &[Real]| {
        let mut a = anchor.clone();
        let mut h = heads.clone();
        a.feature = p[..fdim].to_vec();
        let mut at = fdim;
        for o in &mut a.offsets {
            *o = [p[at], p[at + 1], p[at + 2]];
            at += 3;
        }
        a.scale = [p[at], p[at + 1], p[at + 2]];
        at += 3;
        for (net, n) in [&mut h.opacity, &mut h.color, &mut h.scale, &mut h.rotation].into_iter().zip(sizes) {
            net.set_params(p[at..at + n].to_vec()).unwrap();
            at += n;
        }
        gaussian_loss(&spawn_gaussians(&a, &h, &cam).unwrap().0, &w)
    };
    rel_err(&analytic, &numeric_grad(&mut f, &x, &all(x.len())))
}

pub fn small_field(r: &mut ChaCha8Rng) -> HexPlaneField {
    let shape = FieldShape {
        base_resolution: [3, 4, 3, 3],
        multipliers: vec![1, 2],
        feature_dim: 2,
    };
    let mut field = HexPlaneField::new(shape, [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).unwrap();
    field.init_uniform(r, 1.0);
    field
}

pub fn check_hexplane_query(seed: u64) -> Real {
    let mut r = rng(seed);
    let field = small_field(&mut r);
    let p = [0; 3].map(|_| r.random_range(-0.95..0.95));
    let t = r.random_range(0.0..1.0);
    let w = uniform(&mut r, field.output_dim(), 1.0);

    let mut gg = vec![0.0; field.num_params()];
    let dc = field.query_backward([p[0], p[1], p[2], t], &w, &mut gg);
    let mut analytic = gg;
    analytic.extend(dc);

    let np = field.num_params();
    let mut x = field.params().to_vec();
    x.extend(p);
    let mut f = |v: &[Real]| {
        let mut fl = field.clone();
        fl.params_mut().copy_from_slice(&v[..np]);
        dot(&fl.query(v[np], v[np + 1], v[np + 2], t).unwrap(), &w)
    };
    rel_err(&analytic, &numeric_grad(&mut f, &x, &all(x.len())))
}

fn random_gaussians(r: &mut ChaCha8Rng, n: usize) -> Vec<NeuralGaussian> {
    (0..n)
        .map(|i| NeuralGaussian {
            position: [0; 3].map(|_| r.random_range(-0.8..0.8)),
            rotation: Quaternion::from_array([0; 4].map(|_| r.random_range(-1.0..1.0)))
                .normalized()
                .unwrap(),
            scale: [0; 3].map(|_| r.random_range(0.2..0.5)),
            color: [0; 3].map(|_| r.random_range(0.0..1.0)),
            opacity: r.random_range(0.1..0.9),
            anchor_id: i as u64,
            slot: 0,
        })
        .collect()
}

pub fn check_deform(seed: u64) -> Real {
    let mut r = rng(seed);
    let field = small_field(&mut r);
    let mut dec = DeformationDecoders::new(field.output_dim(), 6).unwrap();
    for net in [&mut dec.fuser, &mut dec.position, &mut dec.rotation, &mut dec.scale] {
        let n = net.num_params();
        net.set_params(uniform(&mut r, n, 0.3)).unwrap();
    }
    let mut gs = random_gaussians(&mut r, 3);
    for g in &mut gs {
        g.scale = [0; 3].map(|_| r.random_range(1.0..2.0));
    }
    let t = r.random_range(0.0..1.0);
    let w = random_gaussian_grads(&mut r, gs.len());

    let (out, tape) = deform_gaussians(&gs, &field, &dec, t).unwrap();
    assert_eq!(tape.clamped_scales, 0);
    let _ = out;
    let mut fg = vec![0.0; field.num_params()];
    let mut dg = DecoderGrads::zeros(&dec);
    let d_in = deform_backward(&tape, &gs, &field, &dec, &w, &mut fg, &mut dg).unwrap();
    let mut analytic: Vec<Real> = Vec::new();
    for g in &d_in {
        analytic.extend(g.position);
        analytic.extend(g.rotation);
        analytic.extend(g.scale);
        analytic.extend(g.color);
        analytic.push(g.opacity);
    }
    analytic.extend(&fg);
    for v in [&dg.fuser, &dg.position, &dg.rotation, &dg.scale] {
        analytic.extend(v);
    }

    let sizes = [
        dec.fuser.num_params(),
        dec.position.num_params(),
        dec.rotation.num_params(),
        dec.scale.num_params(),
    ];
    let mut x: Vec<Real> = Vec::new();
    for g in &gs {
        x.extend(g.position);
        x.extend(g.rotation.to_array());
        x.extend(g.scale);
        x.extend(g.color);
        x.push(g.opacity);
    }
    let per = 14;
    x.extend(field.params());
    for net in [&dec.fuser, &dec.position, &dec.rotation, &dec.scale] {
        x.extend(net.params());
    }
    let np = field.num_params();
    let mut f = |p: &[Real]| {
        let mut g2 = gs.clone();
        for (i, g) in g2.iter_mut().enumerate() {
            let b = &p[i * per..(i + 1) * per];
            g.position = [b[0], b[1], b[2]];
            g.rotation = Quaternion::from_array([b[3], b[4], b[5], b[6]]);
            g.scale = [b[7], b[8], b[9]];
            g.color = [b[10], b[11], b[12]];
            g.opacity = b[13];
        }
        let mut at = gs.len() * per;
        let mut fl = field.clone();
        fl.params_mut().copy_from_slice(&p[at..at + np]);
        at += np;
        let mut d = dec.clone();
        for (net, n) in [&mut d.fuser, &mut d.position, &mut d.rotation, &mut d.scale].into_iter().zip(sizes) {
            net.set_params(p[at..at + n].to_vec()).unwrap();
            at += n;
        }
        gaussian_loss(&deform_gaussians(&g2, &fl, &d, t).unwrap().0, &w)
    };
    rel_err(&analytic, &numeric_grad(&mut f, &x, &all(x.len())))
}

pub fn check_tv(seed: u64) -> Real {
    let mut r = rng(seed);
    let field = small_field(&mut r);
    let (_, analytic) = tv_loss_with_grad(&field);
    let mut f = |p: &[Real]| {
        let mut fl = field.clone();
        fl.params_mut().copy_from_slice(p);
        tv_loss_with_grad(&fl).0
    };
    rel_err(&analytic, &numeric_grad(&mut f, field.params(), &all(field.num_params())))
}

pub fn check_project(seed: u64) -> Real {
    let mut r = rng(seed);
    let cam = test_camera(
        [r.random_range(-2.0..2.0), r.random_range(-1.0..1.0), r.random_range(2.0..4.0)],
        64,
    );
    let mu = Vector3::from([0; 3].map(|_| r.random_range(-0.5..0.5)));
    let a = Matrix3::from_iterator((0..9).map(|_| r.random_range(-0.3..0.3)));
    let sigma = a * a.transpose() + Matrix3::identity() * 0.01;
    let wm = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
    let wc = [0; 3].map(|_| r.random_range(-1.0..1.0));

    let proj = project_gaussian(&mu, &sigma, &cam).unwrap();
    let (d_mu, d_sigma) = project_backward(&proj, &sigma, &cam, wm, wc);
    let mut analytic: Vec<Real> = d_mu.iter().copied().collect();
    analytic.extend(d_sigma.iter());

    let mut x: Vec<Real> = mu.iter().copied().collect();
    x.extend(sigma.iter());
    let mut f = |p: &[Real]| {
        let m = Vector3::new(p[0], p[1], p[2]);
        let s = Matrix3::from_column_slice(&p[3..12]);
        let pr = project_gaussian(&m, &s, &cam).unwrap();
        dot(&pr.mean, &wm) + dot(&pr.cov, &wc)
    };
    rel_err(&analytic, &numeric_grad(&mut f, &x, &all(x.len())))
}

pub fn random_splats(r: &mut ChaCha8Rng, n: usize, size: usize, max_opacity: Real) -> Vec<Splat2D> {
    let s = size as Real;
    (0..n)
        .map(|i| {
            let l = [r.random_range(1.0..0.3 * s), r.random_range(-0.2 * s..0.2 * s), r.random_range(1.0..0.3 * s)];
            Splat2D {
                mean: [r.random_range(-0.1 * s..1.1 * s), r.random_range(-0.1 * s..1.1 * s)],
                cov: [l[0] * l[0] + 0.3, l[0] * l[1], l[1] * l[1] + l[2] * l[2] + 0.3],
                depth: r.random_range(0.5..10.0),
                color: [0; 3].map(|_| r.random_range(0.0..1.0)),
                opacity: r.random_range(0.05..max_opacity),
                source: i,
            }
        })
        .collect()
}

/// Returns the worst relative error and how many coordinates were skipped
/// because a perturbation crossed a compositing gate.
pub fn check_rasterize(seed: u64) -> (Real, usize) {
    let mut r = rng(seed);
    let size = 20;
    let n = r.random_range(1..=6);
    let splats = random_splats(&mut r, n, size, 0.9);
    let bg = [0; 3].map(|_| r.random_range(0.0..1.0));
    let w = uniform(&mut r, size * size * 3, 1.0);

    let out = rasterize(&splats, size, size, bg).unwrap();
    let base_sig = out.contribution_signature();
    let grads = rasterize_backward(&out, &w).unwrap();
    let mut analytic = Vec::new();
    let mut x = Vec::new();
    for (s, g) in splats.iter().zip(&grads) {
        analytic.extend(g.mean);
        analytic.extend(g.cov);
        analytic.extend(g.color);
        analytic.push(g.opacity);
        x.extend(s.mean);
        x.extend(s.cov);
        x.extend(s.color);
        x.push(s.opacity);
    }
    let build = |p: &[Real]| -> Vec<Splat2D> {
        splats
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let b = &p[i * 9..(i + 1) * 9];
                Splat2D {
                    mean: [b[0], b[1]],
                    cov: [b[2], b[3], b[4]],
                    color: [b[5], b[6], b[7]],
                    opacity: b[8],
                    ..s.clone()
                }
            })
            .collect()
    };
    let mut keep = Vec::new();
    let mut skipped = 0;
    let mut p = x.clone();
    for i in 0..x.len() {
        let mut same = true;
        for h in [STEP, -STEP] {
            p[i] = x[i] + h;
            same &= rasterize(&build(&p), size, size, bg).unwrap().contribution_signature() == base_sig;
        }
        p[i] = x[i];
        if same {
            keep.push(i);
        } else {
            skipped += 1;
        }
    }
    let mut f = |p: &[Real]| dot(&rasterize(&build(p), size, size, bg).unwrap().image.data, &w);
    let numeric = numeric_grad(&mut f, &x, &keep);
    let kept: Vec<Real> = keep.iter().map(|&i| analytic[i]).collect();
    (rel_err(&kept, &numeric), skipped)
}

pub fn check_volume(seed: u64) -> Real {
    let mut r = rng(seed);
    let gs = random_gaussians(&mut r, 5);
    let w = uniform(&mut r, 1, 1.0)[0];
    let (_, g) = volume_regularization(&gs);
    let analytic: Vec<Real> = g.iter().flatten().map(|v| w * v).collect();
    let x: Vec<Real> = gs.iter().flat_map(|g| g.scale).collect();
    let mut f = |p: &[Real]| {
        let mut g2 = gs.clone();
        for (i, g) in g2.iter_mut().enumerate() {
            g.scale = [p[3 * i], p[3 * i + 1], p[3 * i + 2]];
        }
        w * volume_regularization(&g2).0
    };
    rel_err(&analytic, &numeric_grad(&mut f, &x, &all(x.len())))
}

pub fn check_color_loss(seed: u64) -> Real {
    let mut r = rng(seed);
    let (w, h) = (14, 12);
    let n = w * h * 3;
    let rendered = Image::new(w, h, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let target = Image::new(w, h, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let lambda = 0.2;
    let analytic = color_loss(&rendered, &target, lambda).unwrap().grad;
    let which: Vec<usize> = (0..48).map(|_| r.random_range(0..n)).collect();
    let mut f = |p: &[Real]| {
        let img = Image::new(w, h, p.to_vec()).unwrap();
        color_loss(&img, &target, lambda).unwrap().value
    };
    let numeric = numeric_grad(&mut f, &rendered.data, &which);
    let picked: Vec<Real> = which.iter().map(|&i| analytic[i]).collect();
    rel_err(&picked, &numeric)
}

/// Largest pixel difference between the tiled rasterizer and the per-pixel
/// reference over one random scene of up to 64 splats at 32×32.
pub fn raster_oracle_diff(seed: u64) -> Real {
    let mut r = rng(seed ^ 0x0a11_ce);
    let size = 32;
    let n = r.random_range(0..=64);
    let splats = random_splats(&mut r, n, size, 0.99);
    let bg = [0; 3].map(|_| r.random_range(0.0..1.0));
    let fast = rasterize(&splats, size, size, bg).unwrap();
    let slow = nvs4d::render::rasterize_reference(&splats, size, size, bg);
    fast.image.data.iter().zip(&slow).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
}

pub fn tiny_spec() -> nvs4d::io::SynthSpec {
    nvs4d::io::SynthSpec {
        width: 24,
        height: 24,
        cameras: 3,
        timestamps: 4,
        blobs: 3,
        points_per_blob: 12,
        point_times: 3,
        ..nvs4d::io::SynthSpec::default()
    }
}

/// A short three-stage schedule on a coarse lattice with early densification
/// and detection, so every code path runs within seconds.
pub fn tiny_config(seed: u64) -> nvs4d::train::TrainConfig {
    let mut c = nvs4d::train::TrainConfig {
        seed,
        stage1_iterations: 20,
        stage2_iterations: 40,
        stage3_iterations: 20,
        ..nvs4d::train::TrainConfig::default()
    };
    c.model.voxel_size = 0.15;
    c.model.gaussians_per_anchor = 4;
    c.model.feature_dim = 8;
    c.model.head_hidden = 8;
    c.model.field_resolution = [4, 4, 4, 3];
    c.model.field_dim = 4;
    c.model.fuser_hidden = 8;
    c.densify.start = 10;
    c.densify.interval = 10;
    c.densify.grow_until = 30;
    c.detect.warmup = 5;
    c.detect.gamma_start = 0.5;
    c.detect.gamma_end = 0.4;
    c
}

/// Max pixel difference between the undeformed render and renders at the given
/// times, for a freshly initialized model.
pub fn identity_at_init_diff(times: &[Real]) -> Vec<Real> {
    let ds = nvs4d::io::generate_synthetic_scene(&tiny_spec(), 5).unwrap();
    let trainer = nvs4d::train::Trainer::new(tiny_config(5), &ds).unwrap();
    let cam = &ds.frames[0].camera;
    let base = nvs4d::train::render_view(&trainer.model, cam, None, [0.0; 3]).unwrap();
    times
        .iter()
        .map(|&t| {
            let v = nvs4d::train::render_view(&trainer.model, cam, Some(t), [0.0; 3]).unwrap();
            assert_eq!(v.image().data.len(), base.image().data.len());
            v.image()
                .data
                .iter()
                .zip(&base.image().data)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        })
        .collect()
}

/// Deforms `n` random Gaussians with random nonzero decoders and counts those
/// whose color or opacity changed in any bit.
pub fn selective_deformation_violations(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let field = small_field(&mut r);
    let mut dec = DeformationDecoders::new(field.output_dim(), 8).unwrap();
    for net in [&mut dec.fuser, &mut dec.position, &mut dec.rotation, &mut dec.scale] {
        let k = net.num_params();
        net.set_params(uniform(&mut r, k, 0.5)).unwrap();
    }
    let gs = random_gaussians(&mut r, n);
    let t = r.random_range(0.0..=1.0);
    let (out, _) = deform_gaussians(&gs, &field, &dec, t).unwrap();
    gs.iter()
        .zip(&out)
        .filter(|(a, b)| {
            a.opacity.to_bits() != b.opacity.to_bits()
                || a.color.iter().zip(&b.color).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .count()
}

pub struct TraceRow {
    pub psnr: Real,
    pub gamma: Real,
    pub threshold: Option<Real>,
    pub flagged: bool,
    pub ema_after: Real,
}

pub fn psnr_trace() -> Vec<TraceRow> {
    let text = include_str!("../fixtures/psnr_trace.csv");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("index"))
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            TraceRow {
                psnr: c[1].parse().unwrap(),
                gamma: c[2].parse().unwrap(),
                threshold: (!c[3].is_empty()).then(|| c[3].parse().unwrap()),
                flagged: c[4] == "1",
                ema_after: c[5].parse().unwrap(),
            }
        })
        .collect()
}

/// Replays the fixture through the detector. Returns the indices where the
/// flag or threshold disagrees with the fixture, the final EMA, and the
/// fixture's final EMA.
pub fn replay_trace() -> (Vec<usize>, Real, Real) {
    let rows = psnr_trace();
    let n = rows.len() as u64;
    let mut ema = nvs4d::train::EmaTracker::new(0.4);
    let mut mismatches = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let gamma = nvs4d::train::gamma_schedule(0.05, 0.02, i as u64, n);
        let d = nvs4d::train::detect_crude_psnr(&mut ema, row.psnr, gamma);
        if gamma.to_bits() != row.gamma.to_bits()
            || d.flagged != row.flagged
            || d.threshold.map(Real::to_bits) != row.threshold.map(Real::to_bits)
            || ema.value.to_bits() != row.ema_after.to_bits()
        {
            mismatches.push(i);
        }
    }
    (mismatches, ema.value, rows.last().unwrap().ema_after)
}
