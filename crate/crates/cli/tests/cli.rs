use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mif(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mif"))
        .env("MIF_LOG", "warn")
        .args(args)
        .arg("--threads")
        .arg("1")
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn summary(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn subcommands_chain_from_scans_to_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let sim = d.join("sim");
    let s = summary(&mif(&["simulate"], &sim));
    assert_eq!(s["command"], "simulate");
    assert_eq!(std::fs::read_dir(sim.join("scans")).unwrap().count(), 8);
    let hash = s["config_hash"].as_str().unwrap().to_string();
    assert_eq!(json(&sim.join("manifest.json"))["config_hash"], hash.as_str());

    let pre = d.join("pre");
    let scans = sim.join("scans");
    let poses = sim.join("poses.txt");
    summary(&mif(
        &["preprocess", "--scans", scans.to_str().unwrap(), "--poses", poses.to_str().unwrap()],
        &pre,
    ));
    assert!(pre.join("scanset.mifss").exists());

    let tr = d.join("train");
    let scanset = pre.join("scanset.mifss");
    summary(&mif(&["train", "--scanset", scanset.to_str().unwrap(), "--iterations", "3"], &tr));
    let losses = std::fs::read_to_string(tr.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().filter(|l| !l.starts_with('#')).count(), 4);

    let ckpt = tr.join("checkpoint.mif");
    let me = d.join("mesh");
    summary(&mif(&["mesh", "--checkpoint", ckpt.to_str().unwrap(), "--format", "obj"], &me));
    assert!(me.join("mesh.obj").exists());

    let ev = d.join("eval");
    let reference = sim.join("reference.ply");
    let s = summary(&mif(
        &["eval", "--pred", reference.to_str().unwrap(), "--gt", reference.to_str().unwrap()],
        &ev,
    ));
    assert_eq!(s["command"], "eval");
    let m = json(&ev.join("metrics.json"));
    assert_eq!(m["fscore"], 1.0);
    assert_eq!(m["accuracy"], 0.0);
    assert_eq!(m["completion"], 0.0);
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "config_hash").unwrap();
    assert_eq!(row[col], m["config_hash"].as_str().unwrap());
}

#[test]
fn failures_are_reported_as_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mif(&["train", "--scanset", "does/not/exist.mifss"], tmp.path());
    assert!(!o.status.success());
    let line: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(line["command"], "train");
    assert!(line["error"].is_string());
    assert!(line["message"].as_str().unwrap().contains("exist.mifss"));

    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"batch_rays": 0}}"#).unwrap();
    let o = mif(&["pipeline", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    let line: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(line["command"], "pipeline");
}
