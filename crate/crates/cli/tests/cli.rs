use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cr3d_core::io::{save_cloud, CloudFormat};
use cr3d_core::synth::{corridor_sequence, CorridorParams};

fn cr3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cr3d")).args(args).output().expect("spawn cr3d")
}

fn ok(args: &[&str]) -> String {
    let out = cr3d(args);
    assert!(
        out.status.success(),
        "cr3d {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small scenes keep the end-to-end run fast.
const SMALL: [&str; 6] = [
    "--set",
    "synth_points_per_structure=150",
    "--set",
    "n_keypoints=150",
    "--set",
    "words=16",
];

fn write_corridor(dir: &Path) -> (PathBuf, PathBuf) {
    let seq = corridor_sequence(&CorridorParams::default());
    let scans = dir.join("scans");
    fs::create_dir_all(&scans).unwrap();
    let mut odo = String::from("# t tx ty tz rx ry rz\n");
    for (i, (scan, pose)) in seq.scans().iter().zip(seq.odometry()).enumerate() {
        save_cloud(scan, scans.join(format!("scan_{i:02}.xyz")), CloudFormat::XyzText).unwrap();
        assert!(pose.yaw_deviation() < 1e-12);
        let t = pose.translation();
        odo.push_str(&format!("{} {} {} {} 0 0 {}\n", seq.timestamps()[i], t.x, t.y, t.z, pose.yaw()));
    }
    let odometry = dir.join("odometry.txt");
    fs::write(&odometry, odo).unwrap();
    (scans, odometry)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = cr3d(&["localize", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cr3d(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_defaults_and_overrides() {
    let text = ok(&["config"]);
    assert!(text.contains("words = 64"), "{text}");
    assert!(text.contains("use_ics = true"));
    let text = ok(&["config", "--set", "words=32", "--set", "use_ics=false"]);
    assert!(text.contains("words = 32") && text.contains("use_ics = false"));
    assert_eq!(cr3d(&["config", "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(cr3d(&["config", "--set", "words=0"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "words = 8\n").unwrap();
    assert!(ok(&["config", "--config", p(&cfg)]).contains("words = 8"));
    assert_eq!(cr3d(&["config", "--config", p(&dir.path().join("missing.toml"))]).status.code(), Some(1));
}

#[test]
fn build_map_from_corridor() {
    let dir = tempfile::tempdir().unwrap();
    let (scans, odometry) = write_corridor(dir.path());
    let a = dir.path().join("maps_a");
    let b = dir.path().join("maps_b");
    ok(&["build-map", "--scans", p(&scans), "--odometry", p(&odometry), "--out", p(&a)]);
    ok(&["build-map", "--scans", p(&scans), "--odometry", p(&odometry), "--out", p(&b)]);
    let mut maps: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    maps.sort();
    assert_eq!(maps, ["map_000.ply", "map_001.ply"]);
    for m in &maps {
        assert_eq!(fs::read(a.join(m)).unwrap(), fs::read(b.join(m)).unwrap());
    }
    let missing = dir.path().join("none.txt");
    let out = cr3d(&["build-map", "--scans", p(&scans), "--odometry", p(&missing), "--out", p(&a)]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(&missing, "0 1 2\n").unwrap();
    let out = cr3d(&["build-map", "--scans", p(&scans), "--odometry", p(&missing), "--out", p(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mine_pairs_writes_tpr1() {
    let dir = tempfile::tempdir().unwrap();
    let (scans, odometry) = write_corridor(dir.path());
    let out = dir.path().join("pairs.tpr");
    ok(&[
        "mine-pairs", "--scans", p(&scans), "--odometry", p(&odometry), "--out", p(&out),
        "--set", "n_pairs=4", "--set", "tdf_grid_dim=8", "--set", "pair_dt=2.0",
    ]);
    let bytes = fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"TPR1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
    assert!(dir.path().join("pairs.tpr.meta.json").is_file());
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let run = |args: &[&str]| ok(&[args, &SMALL[..]].concat());
    run(&["synth", "--seed", "7", "--count", "3", "--out", p(&d("data"))]);
    assert!(d("data/query_002.ply").is_file() && d("data/ground_truth.json").is_file());
    let refs: Vec<String> = (0..3).map(|i| format!("{}/ref_{i:03}.ply", p(&d("data")))).collect();
    let queries: Vec<String> = (0..3).map(|i| format!("{}/query_{i:03}.ply", p(&d("data")))).collect();
    let with = |head: &[&str], files: &[String]| -> Vec<String> {
        head.iter().map(|s| s.to_string()).chain(files.iter().cloned()).collect()
    };
    let args = with(&["extract", "--out-dir", p(&d("ref"))], &refs);
    run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(d("ref/ref_000.dsc").is_file() && d("ref/ref_000.ics.json").is_file());
    run(&["train-vocab", "--out", p(&d("ref/vocab.voc")), p(&d("ref"))]);
    run(&["index", "--vocab", p(&d("ref/vocab.voc")), "--out", p(&d("ref/db.idx")), p(&d("ref"))]);
    let args = with(&["localize", "--index", p(&d("ref/db.idx")), "--out", p(&d("rank.json"))], &queries);
    let text = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(text.lines().count(), 3);
    let args = with(&["detect", "--index", p(&d("ref/db.idx")), "--out-dir", p(&d("rep"))], &queries);
    run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("rep/query_001.json")).unwrap()).unwrap();
    assert_eq!(report["query_id"], 1);
    assert_eq!(report["changes"].as_array().unwrap().len(), 150);
    assert!(report.get("to_ics").is_none());
    let text = run(&[
        "evaluate", "--gt", p(&d("data/ground_truth.json")), "--reports", p(&d("rep")),
        "--rankings", p(&d("rank.json")), "--table", p(&d("table.txt")),
    ]);
    for key in ["top-1 accuracy", "top-5 accuracy", "ANR"] {
        assert!(text.contains(key), "{text}");
    }
    assert_eq!(fs::read_to_string(d("table.txt")).unwrap().lines().count(), 4);

    // ablation: map-frame keypoints end-to-end, reports carry the ICS map
    let args = with(&["extract", "--no-ics", "--out-dir", p(&d("ref_raw"))], &refs);
    run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    run(&["index", "--vocab", p(&d("ref/vocab.voc")), "--out", p(&d("ref_raw/db.idx")), p(&d("ref_raw"))]);
    let args = with(&["detect", "--no-ics", "--index", p(&d("ref_raw/db.idx")), "--out-dir", p(&d("rep_raw"))], &queries);
    run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("rep_raw/query_001.json")).unwrap()).unwrap();
    assert!(report.get("to_ics").is_some());
    run(&["evaluate", "--gt", p(&d("data/ground_truth.json")), "--reports", p(&d("rep_raw"))]);

    // ICS descriptors cannot feed the map-frame ablation
    let out = cr3d(&[&["detect", "--no-ics", "--index", p(&d("ref/db.idx")), "--out-dir", p(&d("x")), p(&d("ref/ref_000.dsc"))], &SMALL[..]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dsc");
    fs::write(&bad, b"DSC1\x01\x00").unwrap();
    let out = cr3d(&["train-vocab", "--out", p(&dir.path().join("v.voc")), p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let cloud = dir.path().join("c.xyz");
    fs::write(&cloud, "1 2\n").unwrap();
    let out = cr3d(&["extract", "--out-dir", p(dir.path()), p(&cloud)]);
    assert_eq!(out.status.code(), Some(2));
    let out = cr3d(&["extract", "--out-dir", p(dir.path()), p(&dir.path().join("absent.xyz"))]);
    assert_eq!(out.status.code(), Some(1));
}
