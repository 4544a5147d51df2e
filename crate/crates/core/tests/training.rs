mod common;

use common::*;
use nvs4d::io::{generate_synthetic_scene, synthetic_blobs, SynthSpec};
use nvs4d::train::{densify_schedule_active, gamma_schedule, Stage, TrainConfig, Trainer};

#[test]
fn psnr_trace_replays_exactly() {
    let rows = psnr_trace();
    assert_eq!(rows.len(), 50);
    let (mismatch, ema, expected) = replay_trace();
    assert!(mismatch.is_empty(), "rows {mismatch:?} differ");
    assert_eq!(ema.to_bits(), expected.to_bits());
    assert_eq!(rows.iter().filter(|r| r.flagged).count(), 40);
}

#[test]
fn gamma_endpoints() {
    assert_eq!(gamma_schedule(0.05, 0.02, 0, 100), 0.05);
    assert!((gamma_schedule(0.05, 0.02, 50, 100) - 0.035).abs() < 1e-15);
    assert_eq!(gamma_schedule(0.05, 0.02, 100, 100), 0.02);
    assert_eq!(gamma_schedule(0.05, 0.02, 500, 100), 0.02);
}

#[test]
fn densify_window_spot_values() {
    assert_eq!(densify_schedule_active(400), (false, false));
    assert_eq!(densify_schedule_active(500), (true, true));
    assert_eq!(densify_schedule_active(550), (false, false));
    assert_eq!(densify_schedule_active(12000), (true, true));
    assert_eq!(densify_schedule_active(12100), (false, true));
}

#[test]
fn detector_runs_once_per_fine_iteration() {
    let ds = generate_synthetic_scene(&tiny_spec(), 0).unwrap();
    let cfg = tiny_config(0);
    let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
    t.run_stage1_coarse(&ds).unwrap();
    assert_eq!(t.detector.calls, 0);
    assert!(t.stack.is_empty());
    let mut rows = Vec::new();
    while t.cursor.stage == Stage::Fine {
        let r = t.step(&ds).unwrap().unwrap();
        if r.iteration < cfg.detect.warmup {
            assert!(!r.flag_quality && !r.flag_gradient, "flag during warmup at {}", r.iteration);
        }
        rows.push(r);
        if t.cursor.iteration == cfg.stage2_iterations {
            break;
        }
    }
    assert_eq!(t.detector.calls, cfg.stage2_iterations);
    assert_eq!(rows.len() as u64, cfg.stage2_iterations);
    let flagged: std::collections::BTreeSet<usize> = rows
        .iter()
        .filter(|r| r.flag_quality || r.flag_gradient)
        .map(|r| r.camera_id)
        .collect();
    let stacked: std::collections::BTreeSet<usize> = t.stack.entries.iter().map(|e| e.camera_id).collect();
    assert_eq!(flagged, stacked);
    let hits: u64 = t.stack.entries.iter().map(|e| e.hits).sum();
    let flags: u64 = rows.iter().map(|r| r.flag_quality as u64 + r.flag_gradient as u64).sum();
    assert_eq!(hits, flags);
}

#[test]
fn full_tiny_run_visits_every_stage() {
    let ds = generate_synthetic_scene(&tiny_spec(), 1).unwrap();
    let mut t = Trainer::new(tiny_config(1), &ds).unwrap();
    let mut ended = Vec::new();
    let mut rows = 0;
    t.run(&ds, &mut |_| rows += 1, &mut |_, s| {
        ended.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(t.cursor.stage, Stage::Done);
    if t.stack.is_empty() {
        assert_eq!(ended, vec![Stage::Coarse, Stage::Fine]);
        assert_eq!(rows, 60);
    } else {
        assert_eq!(ended, vec![Stage::Coarse, Stage::Fine, Stage::Refine]);
        assert_eq!(rows, 80);
        assert!(t.refine_psnr.0.is_some() && t.refine_psnr.1.is_some());
    }
    assert!(t.mean_psnr(&ds, None).unwrap().is_finite());
}

#[test]
fn parameter_count_ignores_frame_count() {
    let counts: Vec<(usize, usize)> = [2, 8, 32]
        .iter()
        .map(|&n| {
            let spec = SynthSpec { timestamps: n, ..tiny_spec() };
            let ds = generate_synthetic_scene(&spec, 9).unwrap();
            let t = Trainer::new(tiny_config(9), &ds).unwrap();
            (t.model.anchors.len(), t.model.num_params())
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}

#[test]
fn synthetic_point_cloud_follows_the_blobs() {
    let spec = SynthSpec::default();
    let ds = generate_synthetic_scene(&spec, 4).unwrap();
    let blobs = synthetic_blobs(&spec, 4);
    // Points are drawn at evenly spaced times, so their centroid tracks the
    // mean blob position over those times.
    let times: Vec<f64> = (0..spec.point_times).map(|i| i as f64 / (spec.point_times - 1) as f64).collect();
    let mut expect = [0.0_f64; 3];
    for b in &blobs {
        for &t in &times {
            let p = b.position(t, spec.amplitude);
            (0..3).for_each(|j| expect[j] += p[j]);
        }
    }
    let n = (blobs.len() * times.len()) as f64;
    let mut got = [0.0_f64; 3];
    for p in &ds.points {
        (0..3).for_each(|j| got[j] += p[j]);
    }
    for j in 0..3 {
        let (e, g) = (expect[j] / n, got[j] / ds.points.len() as f64);
        assert!((e - g).abs() < 0.02, "axis {j}: {e} vs {g}");
    }
    assert!((ds.points.iter().map(|p| p[0]).sum::<f64>() / ds.points.len() as f64) > blobs.iter().map(|b| b.base[0]).sum::<f64>() / blobs.len() as f64);
}

#[test]
fn config_file_round_trip_and_rejects_unknown_keys() {
    let c = tiny_config(3);
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert!(TrainConfig::from_toml("bogus = 1").is_err());
    assert!(TrainConfig::from_toml("stage1_iterations = -4").is_err());
}
