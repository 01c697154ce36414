use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TOY: &str = r#"{
  "seed": 5,
  "grid": {"rows": 6, "cols": 6},
  "camera_coverage": 0.6,
  "sim": {"n_vehicles": 60, "twin_probability": 0.2, "plate_capture_probability": 0.5,
          "d_app": 16, "d_plate": 8, "route": "random-walk", "walk_hops": [6, 10]},
  "node2vec": {"walks_per_node": 4, "walk_length": 10, "epochs": 1},
  "model": {"d_model": 16, "heads": 2, "d_ff": 32, "enc_layers": 1, "dec_layers": 1,
            "d_app": 16, "gcn_hidden": 16, "d_st": 16},
  "train": {"epochs": 2, "batch_size": 8}
}"#;

fn camtraj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camtraj"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = camtraj(args);
    assert!(
        out.status.success(),
        "camtraj {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().expect("stderr has a line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {last}"))
}

fn pipeline(dir: &Path, cfg: &Path) {
    let (d, c) = (dir.to_str().unwrap(), cfg.to_str().unwrap());
    ok(&["gen", "--config", c, "--out", d, "--quiet"]);
    ok(&["cluster", "--out", d, "--quiet"]);
    ok(&["train", "--out", d, "--quiet"]);
    for m in ["sp", "sp+tklet", "hmm", "model", "model-dhm"] {
        ok(&["recover", "--method", m, "--out", d, "--quiet"]);
    }
    ok(&["eval", "--out", d, "--quiet"]);
    ok(&["speed", "--method", "sp", "--out", d, "--quiet"]);
    ok(&["feedback", "--method", "sp", "--out", d, "--quiet"]);
    ok(&["export-geojson", "--method", "model", "--out", d, "--quiet"]);
}

fn toy_config(dir: &Path) -> PathBuf {
    let p = dir.join("toy.json");
    fs::write(&p, TOY).unwrap();
    p
}

fn read(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &cfg);
    pipeline(&b, &cfg);

    let files = [
        "config.json",
        "network.json",
        "cameras.json",
        "records.jsonl",
        "tracklets.jsonl",
        "trajectories.jsonl",
        "clusters.json",
        "labels.jsonl",
        "cluster_truth.jsonl",
        "split.json",
        "checkpoint.json",
        "train_report.json",
        "recovered_sp.jsonl",
        "recovered_sp+tklet.jsonl",
        "recovered_hmm.jsonl",
        "recovered_model.jsonl",
        "recovered_model-dhm.jsonl",
        "metrics.json",
        "speed_map.json",
        "speed.geojson",
        "feedback.json",
        "clusters_feedback.json",
        "trajectories.geojson",
        "manifest.json",
        "logs/train.log",
    ];
    for f in files {
        let x = fs::read(a.join(f)).unwrap_or_else(|_| panic!("{f} missing"));
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between reruns");
    }
    assert!(!a.join(".lock").exists());

    let hash = read(&a, "checkpoint.json")["meta"]["config_hash"].clone();
    assert_eq!(hash.as_str().unwrap().len(), 64);
    for f in ["train_report.json", "metrics.json", "speed_map.json", "feedback.json", "trajectories.geojson", "split.json"] {
        assert_eq!(read(&a, f)["meta"]["config_hash"], hash, "{f}");
        assert_eq!(read(&a, f)["meta"]["seed"], 5, "{f}");
    }
    let manifest = read(&a, "manifest.json");
    assert_eq!(manifest["files"]["records.jsonl"]["meta"]["config_hash"], hash);

    let metrics = read(&a, "metrics.json");
    for m in ["sp", "sp+tklet", "hmm", "model", "model-dhm"] {
        let iou = metrics["methods"][m]["iou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&iou), "{m}: {iou}");
    }
    let line = fs::read_to_string(a.join("recovered_model.jsonl")).unwrap();
    let first: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["cluster_id", "nodes", "scores", "truncated"] {
        assert!(first.get(key).is_some(), "recovered line lacks {key}");
    }
    let geo = read(&a, "trajectories.geojson");
    assert_eq!(geo["type"], "FeatureCollection");
    let kinds: Vec<&str> = geo["features"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["geometry"]["type"].as_str().unwrap())
        .collect();
    assert!(kinds.contains(&"LineString") && kinds.contains(&"Point"));
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("paths.jsonl");
    fs::write(
        &p,
        "{\"cluster_id\":1,\"nodes\":[1,2,3]}\n{\"cluster_id\":2,\"nodes\":[7,8]}\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    let (ps, os) = (p.to_str().unwrap(), out.to_str().unwrap());
    let stdout = ok(&["eval", "--pred", ps, "--gt", ps, "--out", os]);
    assert!(stdout.contains("precision"));
    let m = read(&out, "metrics.json");
    let row = &m["methods"]["paths"];
    for k in ["precision", "recall", "iou"] {
        assert_eq!(row[k].as_f64().unwrap(), 1.0, "{k}");
    }
    assert_eq!(row["n"], 2);
}

#[test]
fn missing_inputs_give_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let out = camtraj(&["cluster", "--out", d]);
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "missing-file");
    assert!(e["error"]["message"].as_str().unwrap().contains("network.json"));
    assert!(!tmp.path().join(".lock").exists());
}

#[test]
fn bad_config_and_method_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"sede": 1}"#).unwrap();
    let d = tmp.path().join("run");
    let out = camtraj(&["gen", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");

    let out = camtraj(&["recover", "--method", "beam", "--out", d.to_str().unwrap()]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn schema_violations_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.jsonl");
    fs::write(&p, "{\"cluster_id\":1,\"nodes\":[1]}\n{\"cluster\":2}\n").unwrap();
    let ps = p.to_str().unwrap();
    let out = camtraj(&["eval", "--pred", ps, "--gt", ps, "--out", tmp.path().join("r").to_str().unwrap()]);
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "schema");
    assert!(e["error"]["message"].as_str().unwrap().contains("line 2"));
}

#[test]
fn a_locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".lock"), "1\n").unwrap();
    let out = camtraj(&["gen", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(error_json(&out)["error"]["kind"], "locked");
    assert!(tmp.path().join(".lock").exists());
    assert!(!tmp.path().join("network.json").exists());
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let d = tmp.path().join("run");
    ok(&["gen", "--config", cfg.to_str().unwrap(), "--seed", "11", "--out", d.to_str().unwrap(), "--quiet"]);
    assert_eq!(read(&d, "config.json")["seed"], 11);
    assert_eq!(read(&d, "manifest.json")["files"]["network.json"]["meta"]["seed"], 11);
}
