mod common;

use std::fs;

use common::*;
use nvs4d::io::{
    checkpoint_bytes, export_snapshot, generate_synthetic_scene, load_checkpoint, load_dataset, read_ply,
    save_checkpoint, trainer_from_bytes, write_dataset, write_ply, TRANSFORMS_FILE,
};
use nvs4d::train::Trainer;
use nvs4d::Error;

#[test]
fn dataset_survives_write_and_load() {
    let ds = generate_synthetic_scene(&tiny_spec(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.frames.len(), ds.frames.len());
    for (a, b) in ds.frames.iter().zip(&back.frames) {
        assert_eq!(a.image, b.image, "{}", a.file_path);
        assert_eq!(a.camera_id, b.camera_id);
        assert!((a.time - b.time).abs() < 1e-12);
        let (ca, cb) = (&a.camera, &b.camera);
        assert!((ca.rotation - cb.rotation).abs().max() < 1e-12);
        assert!((ca.center - cb.center).norm() < 1e-12);
        assert!((ca.fx - cb.fx).abs() < 1e-9 && (ca.cx - cb.cx).abs() < 1e-9);
    }
    assert_eq!(back.points, ds.points);
}

#[test]
fn loader_names_the_bad_field() {
    let ds = generate_synthetic_scene(&tiny_spec(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join(TRANSFORMS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["frames"][1]["transform_matrix"] = serde_json::json!("oops");
    fs::write(&path, json.to_string()).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Parse { field, .. }) => assert!(field.contains("frames[1]"), "{field}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn loader_rejects_missing_images() {
    let ds = generate_synthetic_scene(&tiny_spec(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    fs::remove_file(dir.path().join(&ds.frames[3].file_path)).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

fn trained(seed: u64) -> (Trainer, nvs4d::io::Dataset) {
    let ds = generate_synthetic_scene(&tiny_spec(), seed).unwrap();
    let mut t = Trainer::new(tiny_config(seed), &ds).unwrap();
    for _ in 0..35 {
        t.step(&ds).unwrap();
    }
    (t, ds)
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (t, _) = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    save_checkpoint(&t, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    let q = dir.path().join("b.ckpt");
    save_checkpoint(&back, &q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn restored_trainer_continues_identically() {
    let (mut a, ds) = trained(3);
    let mut b = trainer_from_bytes(&checkpoint_bytes(&a)).unwrap();
    for _ in 0..10 {
        let ra = a.step(&ds).unwrap();
        let rb = b.step(&ds).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (t, _) = trained(4);
    let bytes = checkpoint_bytes(&t);
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(trainer_from_bytes(&bad_magic), Err(Error::Checkpoint(_))));
    for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(trainer_from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(trainer_from_bytes(&flipped), Err(Error::Checkpoint(_))));
    let mut version = bytes;
    version[4] = 99;
    assert!(matches!(trainer_from_bytes(&version), Err(Error::Checkpoint(_))));
}

#[test]
fn ply_reimport_matches_export() {
    let (t, _) = trained(6);
    let gs = export_snapshot(&t, 0.4).unwrap();
    assert!(!gs.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.ply");
    write_ply(&gs, &p).unwrap();
    let back = read_ply(&p).unwrap();
    assert_eq!(back.len(), gs.len());
    for (a, b) in gs.iter().zip(&back) {
        for j in 0..3 {
            assert!((a.position[j] - b.position[j]).abs() <= 1e-6);
            assert!((a.color[j] - b.color[j]).abs() <= 1e-6);
            assert!((a.scale[j] - b.scale[j]).abs() <= 1e-6 * a.scale[j].max(1.0));
        }
        assert!((a.opacity - b.opacity).abs() <= 1e-6);
        for (x, y) in a.rotation.to_array().iter().zip(b.rotation) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn ply_header_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ply");
    fs::write(&p, b"ply\nformat ascii 1.0\nend_header\n").unwrap();
    assert!(read_ply(&p).is_err());
}
