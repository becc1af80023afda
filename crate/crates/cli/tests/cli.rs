use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmad_core::io::{decode_sample, decode_tmf_exact, MapSidecar};

fn mmad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmad")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, classes: &[&str]) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "data": {"classes": classes, "n_train": 8, "n_test": 6, "height": 8, "width": 8},
        "train": {"steps": 8, "batch_size": 4},
        "gradcheck": {"seeds": [0, 1]}
    });
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains once; returns (config, data dir, checkpoint).
fn trained(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_config(dir, "run.json", &["bagel", "rope"]);
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    let o = mmad(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mmad(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (cfg, data, ckpt)
}

#[test]
fn full_workflow_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ckpt) = trained(dir.path());

    let log = std::fs::read_to_string(dir.path().join("model.ckpt.loss.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    let hash = lines[0]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 16);

    let report = dir.path().join("report.json");
    let o = mmad(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&report), "--oracle-check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["config_hash"], hash.as_str());
    assert_eq!(r["fpr_limits"], serde_json::json!([0.3, 0.01]));
    assert_eq!(r["classes"].as_object().unwrap().len(), 2);

    // Second run from scratch: identical bytes everywhere.
    let again = tempfile::tempdir().unwrap();
    let (_, data2, ckpt2) = trained(again.path());
    assert_eq!(std::fs::read(data.join("manifest.json")).unwrap(), std::fs::read(data2.join("manifest.json")).unwrap());
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt2).unwrap());
    let report2 = again.path().join("report.json");
    let o = mmad(&["eval", "--data", s(&data2), "--checkpoint", s(&ckpt2), "--out", s(&report2)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&report2).unwrap());

    // Explicit config gives the same hash as the checkpoint snapshot.
    let report3 = dir.path().join("report3.json");
    let o = mmad(&["eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&report3), "--limit", "0.2", "--limit", "0.05"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r3: serde_json::Value = serde_json::from_slice(&std::fs::read(&report3).unwrap()).unwrap();
    assert_eq!(r3["config_hash"], hash.as_str());
    assert_eq!(r3["fpr_limits"], serde_json::json!([0.2, 0.05]));
}

#[test]
fn infer_writes_map_sidecar_and_preview() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = trained(dir.path());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let sample = data.join(manifest["test"][5]["file"].as_str().unwrap());
    let out = dir.path().join("maps/one.tmf");
    let o = mmad(&["infer", "--checkpoint", s(&ckpt), "--data", s(&sample), "--out", s(&out), "--pgm"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();

    let side: MapSidecar = serde_json::from_slice(&std::fs::read(dir.path().join("maps/one.tmf.json")).unwrap()).unwrap();
    assert_eq!(side.image_score, printed);
    assert_eq!((side.height, side.width, side.checkpoint_step), (8, 8, 8));

    let (map, _) = decode_tmf_exact::<f64>(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(map.shape(), &[8, 8]);
    let (s, _) = decode_sample::<f64>(&std::fs::read(&sample).unwrap()).unwrap();
    let max_valid = map
        .data()
        .iter()
        .zip(s.mask.data())
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(0.0, f64::max);
    assert_eq!(max_valid, f64::from(printed as f32));
    assert!(std::fs::read(dir.path().join("maps/one.tmf.pgm")).unwrap().starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"stepz": 1}}"#).unwrap();
    let o = mmad(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stepz"));

    std::fs::write(&bad, r#"{"fusion": {"alpha": -1.0}}"#).unwrap();
    assert_eq!(code(&mmad(&["gradcheck", "--config", s(&bad)])), 2);

    let o = mmad(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&o), 3);

    let (_, _, ckpt) = trained(dir.path());
    let other = write_config(dir.path(), "other.json", &["tire"]);
    let tire = dir.path().join("tire");
    assert_eq!(code(&mmad(&["gen-data", "--config", s(&other), "--out", s(&tire)])), 0);
    let o = mmad(&["eval", "--data", s(&tire), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("tire"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &["bagel"]);
    let report = dir.path().join("gc.json");
    let o = mmad(&["gradcheck", "--config", s(&cfg), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
    assert_eq!(r["seeds"].as_array().unwrap().len(), 2);

    let corrupt = dir.path().join("corrupt.json");
    std::fs::write(&corrupt, r#"{"gradcheck": {"seeds": [0], "corrupt": {"parameter": "gacm.phi_s.weight", "factor": 1.5}}}"#).unwrap();
    assert_eq!(code(&mmad(&["gradcheck", "--config", s(&corrupt)])), 4);
}
