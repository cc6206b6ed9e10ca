use std::path::Path;
use std::process::{Command, Output};

use hairxfer::curation::load_manifest;
use hairxfer::generator::ToyGenerator;
use hairxfer::pipeline::toy::write_toy_corpus;

fn hairxfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hairxfer")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) {
    write_toy_corpus(&dir.join("data"), &ToyGenerator::new(0), &[0, 1]).unwrap();
    std::fs::write(dir.join("run.cfg"), "[optimizer]\nstage1_iters = 5\nstage2_iters = 5\n").unwrap();
}

#[test]
fn transfer_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let run = hairxfer(&[
        "transfer",
        "--identity",
        s(&data.join("toy000.png")),
        "--shape",
        s(&data.join("toy001.png")),
        "--appearance",
        s(&data.join("toy001.png")),
        "--config",
        s(&dir.path().join("run.cfg")),
        "--out-dir",
        s(&out),
    ]);
    ok(&run);
    for f in ["result.png", "losses.csv", "metrics.json", "latent.json", "prepared-masks/ignore_region.png"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(metrics["tuple_id"], "toy000");

    let eval = hairxfer(&[
        "evaluate",
        "--result",
        s(&out.join("result.png")),
        "--identity",
        s(&data.join("toy000.png")),
        "--face-target",
        s(&out.join("prepared-masks/face_target.png")),
        "--latent",
        s(&out.join("latent.json")),
        "--config",
        s(&dir.path().join("run.cfg")),
        "--tuple-id",
        "toy000",
    ]);
    ok(&eval);
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    for key in ["psnr", "ssim", "latent_distance", "tuple_id", "config_hash"] {
        assert!(!report[key].is_null(), "{key} missing from {report}");
    }
    assert_eq!(report["config_hash"], metrics["config_hash"]);
    let close = |k: &str| (report[k].as_f64().unwrap() - metrics[k].as_f64().unwrap()).abs() < 1e-9;
    assert!(close("latent_distance"));
    // result.png is quantised to 8 bits, so PSNR only agrees approximately
    assert!((report["psnr"].as_f64().unwrap() - metrics["psnr"].as_f64().unwrap()).abs() < 0.5);
}

#[test]
fn edit_mode_requires_its_reference() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let data = dir.path().join("data");
    let id = data.join("toy000.png");
    let out = dir.path().join("edit");
    let bad = hairxfer(&["edit", "--mode", "shape", "--identity", s(&id), "--out-dir", s(&out)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--shape"));
    let good = hairxfer(&[
        "edit",
        "--mode",
        "appearance",
        "--identity",
        s(&id),
        "--appearance",
        s(&data.join("toy001.png")),
        "--config",
        s(&dir.path().join("run.cfg")),
        "--out-dir",
        s(&out),
    ]);
    ok(&good);
    let metrics: serde_json::Value = serde_json::from_slice(&good.stdout).unwrap();
    assert_eq!(metrics["mode"], "appearance_only");
}

#[test]
fn curate_then_batch() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let data = dir.path().join("data");
    let manifest = data.join("manifest.jsonl");
    ok(&hairxfer(&["curate", "--data-dir", s(&data), "--out", s(&manifest), "--min-hair", "0", "--include-rejected"]));
    let records = load_manifest(&manifest).unwrap();
    assert_eq!(records.len(), 8);

    let out = dir.path().join("batch");
    let run = hairxfer(&[
        "batch",
        "--manifest",
        s(&manifest),
        "--config",
        s(&dir.path().join("run.cfg")),
        "--jobs",
        "2",
        "--out-dir",
        s(&out),
    ]);
    ok(&run);
    assert!(out.join("batch_report.json").is_file());
    for r in &records {
        assert!(out.join(&r.id).join("metrics.json").is_file());
    }
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    std::fs::write(dir.path().join("bad.cfg"), "[masks]\nerode = 2.0\n").unwrap();
    let data = dir.path().join("data");
    let run = hairxfer(&[
        "transfer",
        "--identity",
        s(&data.join("toy000.png")),
        "--shape",
        s(&data.join("toy001.png")),
        "--appearance",
        s(&data.join("toy001.png")),
        "--config",
        s(&dir.path().join("bad.cfg")),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("masks.erode"));
}
