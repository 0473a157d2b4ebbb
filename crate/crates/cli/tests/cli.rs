use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssmreg::pipeline::{save_toml, MODEL_CONFIG};
use ssmreg::regnet::{save_checkpoint, RegNet, RegNetConfig};
use ssmreg::synthdata::{read_field, read_labels, read_manifest, read_volume, MANIFEST_FILE};

fn ssmreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmreg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ssmreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_DATASET: &str = "subjects = 5\nsplit = [2.0, 1.0, 2.0]\n[anatomy]\ndims = [16, 16, 16]\n";

fn gen_small(dir: &Path) -> PathBuf {
    let cfg = dir.join("data.toml");
    std::fs::write(&cfg, SMALL_DATASET).unwrap();
    let data = dir.join("data");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    data
}

#[test]
fn gen_data_writes_one_directory_per_subject_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.toml");
    std::fs::write(&cfg, "subjects = 18\nsplit = [15.0, 1.0, 2.0]\n[anatomy]\ndims = [16, 16, 16]\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["gen-data", "--config", p(&cfg), "--out", p(&a), "--seed", "3"]);
    assert!(stdout.contains("18 subjects"));
    let records = read_manifest(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(records.len(), 18);
    let dirs = std::fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 18);

    ok(&["gen-data", "--config", p(&cfg), "--out", p(&b), "--seed", "3"]);
    for rec in &records {
        for f in [&rec.moving, &rec.fixed, &rec.moving_labels, &rec.fixed_labels] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f.display());
        }
    }
}

#[test]
fn invalid_config_field_is_named_with_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "subjects = 5\nsubject_count = 7\n").unwrap();
    let out = ssmreg(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("subject_count"));
}

#[test]
fn train_smoke_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let cfg = dir.path().join("train.toml");
    let text = toml_model_section(&RegNetConfig::minimal());
    std::fs::write(&cfg, format!("epochs = 1\n{text}")).unwrap();
    let out = dir.path().join("run");
    let manifest = data.join(MANIFEST_FILE);
    ok(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&out), "--steps", "1"]);
    for f in ["best.mmkpt", "last.mmkpt", "model.toml", "loss_log.jsonl"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let run = dir.path().join("ablation");
    ok(&[
        "train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run), "--steps", "2",
        "--no-feature-extractor", "--no-grad-surgery",
    ]);
    let log = std::fs::read_to_string(run.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(!log.contains("supcon") && !log.contains("conflict"));
}

fn toml_model_section(cfg: &RegNetConfig) -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toml");
    save_toml(&path, cfg).unwrap();
    format!("[model]\n{}", std::fs::read_to_string(path).unwrap())
}

fn zero_model(dir: &Path, cfg: RegNetConfig) -> PathBuf {
    let mut net = RegNet::<f32>::new(cfg.clone(), 0).unwrap();
    net.zero_head();
    let ckpt = dir.join("zero.mmkpt");
    save_checkpoint(&ckpt, &net.params).unwrap();
    save_toml(&dir.join(MODEL_CONFIG), &cfg).unwrap();
    ckpt
}

#[test]
fn zero_model_registers_to_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.toml");
    std::fs::write(&cfg, "subjects = 3\nsplit = [1.0, 1.0, 1.0]\n").unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let ckpt = zero_model(dir.path(), RegNetConfig::desk());
    let rec = &read_manifest(&data.join(MANIFEST_FILE)).unwrap()[0];
    let out = dir.path().join("reg");
    ok(&[
        "register",
        "--checkpoint", p(&ckpt),
        "--moving", p(&data.join(&rec.moving)),
        "--fixed", p(&data.join(&rec.fixed)),
        "--moving-labels", p(&data.join(&rec.moving_labels)),
        "--out", p(&out),
    ]);
    let moving = read_volume::<f32>(&data.join(&rec.moving)).unwrap();
    let warped = read_volume::<f32>(&out.join("warped.srvol")).unwrap();
    assert_eq!(warped.tensor(), moving.tensor());
    assert_eq!(warped.spacing(), moving.spacing());
    let u = read_field::<f32>(&out, "displacement").unwrap();
    assert!(u.tensor().data().iter().all(|&x| x == 0.0));
    let labels = read_labels(&data.join(&rec.moving_labels), None).unwrap();
    assert_eq!(read_labels(&out.join("warped_labels.srvol"), None).unwrap().labels(), labels.labels());

    let timing: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    let (forward, total) = (timing["forward_s"].as_f64().unwrap(), timing["total_s"].as_f64().unwrap());
    assert!(forward > 0.0 && forward <= total && total <= 2.0 * forward, "forward {forward}s, total {total}s");
}

#[test]
fn mismatched_volumes_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let other_cfg = dir.path().join("other.toml");
    std::fs::write(&other_cfg, "subjects = 3\nsplit = [1.0, 1.0, 1.0]\n[anatomy]\ndims = [8, 8, 8]\n").unwrap();
    let other = dir.path().join("other");
    ok(&["gen-data", "--config", p(&other_cfg), "--out", p(&other)]);
    let ckpt = zero_model(dir.path(), RegNetConfig::minimal());
    let (a, b) = (&read_manifest(&data.join(MANIFEST_FILE)).unwrap()[0], &read_manifest(&other.join(MANIFEST_FILE)).unwrap()[0]);
    let out = ssmreg(&[
        "register",
        "--checkpoint", p(&ckpt),
        "--moving", p(&data.join(&a.moving)),
        "--fixed", p(&other.join(&b.fixed)),
        "--out", p(&dir.path().join("reg")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_identity_writes_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let out = dir.path().join("eval");
    let stdout = ok(&["evaluate", "--manifest", p(&data.join(MANIFEST_FILE)), "--out", p(&out)]);
    assert!(stdout.contains("Dice (%)") && stdout.contains("HD95 (mm)"));
    let lines = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pairs"], 2);
    assert_eq!(summary["neg_jac_mean"], 0.0);
}

#[test]
fn evaluate_reports_missing_files_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path());
    let recs = read_manifest(&data.join(MANIFEST_FILE)).unwrap();
    let victim = recs.iter().find(|r| r.split == ssmreg::synthdata::Split::Test).unwrap();
    std::fs::remove_file(data.join(&victim.moving)).unwrap();
    let out = ssmreg(&["evaluate", "--manifest", p(&data.join(MANIFEST_FILE))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&victim.subject));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(!table.contains(&victim.subject));
}

#[test]
fn bench_has_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.json");
    ok(&["bench", "--lengths", "64,128,256", "--runs", "1", "--out", p(&out)]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["max_abs_diff"].as_f64().unwrap() <= 1e-10));
}
