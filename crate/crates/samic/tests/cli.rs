mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use samic::cli::{sha256_file, RUN_MANIFEST};
use samic::io::load_heatmap;
use samic::report::ReportEntry;
use samic_core::{extract_peaks, HeatmapConfig};
use serde_json::Value;

fn samic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samic")).args(args).env_remove("SAMIC_SEGMENTER_BACKEND").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(out.join(RUN_MANIFEST)).unwrap()).unwrap()
}

fn output_hash(m: &Value, name: &str) -> String {
    m["outputs"].as_array().unwrap().iter().find(|o| o["path"] == name).unwrap()["sha256"].as_str().unwrap().to_string()
}

const SMALL: &str = r#"
[net]
num_4dconv_layers = 1
input_size = [32, 32]
decoder_channels = [8, 8]

[train]
max_epochs = 2
subsample_fraction = 1.0
"#;

#[test]
fn encode_writes_the_rendered_prompt() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("enc");
    let o = samic(&["encode", "--points", "112,112", "--size", "224x224", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let png = image::open(out.join("heatmap.png")).unwrap().to_luma16();
    assert_eq!(png.dimensions(), (224, 224));
    assert_eq!(png.get_pixel(112, 112).0[0], 65535);
    assert_eq!(png.pixels().filter(|p| p.0[0] == 65535).count(), 1);
    let expected = (-(4.0f64 / 224.0).powi(2) / (2.0 * 0.02f64.powi(2))).exp();
    // 0.67126, usually quoted as ≈ 0.6714.
    assert!((expected - 0.6714).abs() < 2e-4);
    assert_eq!(png.get_pixel(116, 112).0[0], (expected * 65535.0).round() as u16);
    let raw = load_heatmap(&out.join("heatmap.raw")).unwrap();
    assert_eq!(raw.get(112, 112), 1.0);

    let m = manifest(&out);
    assert_eq!(m["command"], "encode");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["heatmap"]["sigma"], 0.02);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    for name in ["heatmap.png", "heatmap.raw"] {
        assert_eq!(output_hash(&m, name), sha256_file(&out.join(name)).unwrap());
    }
}

#[test]
fn peaks_match_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let enc = tmp.path().join("enc");
    let o = samic(&["encode", "--points", "56,56", "--points", "168,168", "--size", "224x224", "--out", s(&enc)]);
    assert!(o.status.success());
    let out = tmp.path().join("pk");
    let heat = enc.join("heatmap.png");
    let o = samic(&["peaks", "--in", s(&heat), "--tau", "0.5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file: Value = serde_json::from_slice(&std::fs::read(out.join("peaks.json")).unwrap()).unwrap();
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(file, printed);
    let direct = extract_peaks(&load_heatmap(&heat).unwrap(), &HeatmapConfig { tau: 0.5, ..HeatmapConfig::default() });
    let pts: Vec<[f64; 2]> = direct.points.iter().map(|p| [p.x, p.y]).collect();
    assert_eq!(file["points"], serde_json::to_value(&pts).unwrap());
    assert_eq!(file["fallback"], false);
    assert_eq!(pts.len(), 2);
    let m = manifest(&out);
    assert_eq!(m["inputs"][0]["sha256"], sha256_file(&heat).unwrap());
    assert_eq!(m["config"]["heatmap"]["tau"], 0.5);
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(samic(&[]).status.code(), Some(2));
    assert_eq!(samic(&["frobnicate", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(samic(&["--help"]).status.code(), Some(0));
    assert_eq!(samic(&["encode", "--points", "1,1", "--size", "8x8"]).status.code(), Some(2));
    assert_eq!(samic(&["encode", "--points", "1;1", "--size", "8x8", "--out", s(&out)]).status.code(), Some(2));
    let o = samic(&["encode", "--points", "1,1", "--size", "8x8", "--out", s(&out), "--set", "net.num_4d_layers=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("net.num_4d_layers"));
    let o = samic(&["encode", "--points", "1,1", "--size", "8x8", "--out", s(&out), "--set", "heatmap.sigma=-1"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = tmp.path().join("no-such-dataset");
    let o = samic(&["eval", "--dataset", s(&missing), "--predictor", "oracle", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let m = manifest(&out);
    assert!(m["status"]["error"].as_str().unwrap().contains("no-such-dataset"));
    // Points outside the grid are a runtime error from the codec.
    let o = samic(&["encode", "--points", "9,1", "--size", "8x8", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

fn synth(dir: &Path) -> PathBuf {
    let o = samic(&["synth", "--classes", "4", "--per-class", "3", "--test-classes", "1", "--size", "32", "--seed", "5", "--out", s(dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir.to_path_buf()
}

#[test]
fn seeded_training_twice_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"));
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let train = |name: &str| {
        let out = tmp.path().join(name);
        let o = samic(&["train", "--config", s(&cfg), "--dataset", s(&data), "--seed", "7", "--deterministic", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (train("a"), train("b"));
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(output_hash(&ma, "best.ckpt"), output_hash(&mb, "best.ckpt"));
    assert_eq!(output_hash(&ma, "best.ckpt"), sha256_file(&a.join("best.ckpt")).unwrap());
    assert_eq!(output_hash(&ma, "train_log.jsonl"), output_hash(&mb, "train_log.jsonl"));
    assert_eq!(ma["config"]["train"]["seed"], 7);
    assert_eq!(ma["config"]["train"]["deterministic"], true);
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert!(ma["inputs"].as_array().unwrap().iter().any(|i| i["files_sha256"].is_string()));
    assert!(ma["details"]["backbone"]["fingerprint"].is_string());
    let written: samic::config::RunConfig = toml::from_str(&std::fs::read_to_string(a.join("config.toml")).unwrap()).unwrap();
    assert_eq!(written.net.input_size, (32, 32));
    let summary: Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 2);

    // The checkpoint then drives eval, predict and report export.
    let ev = tmp.path().join("ev");
    let ckpt = a.join("best.ckpt");
    let o = samic(&["eval", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&ckpt), "--name", "synth", "--out", s(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let entry: ReportEntry = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(entry.dataset, "synth");
    assert!(entry.learnable_params.is_some());
    assert!((0.0..=1.0).contains(&entry.report.miou));

    let ds = samic::dataset::load_split_manifest(&data, None).unwrap();
    let test = ds.split("test");
    let pr = tmp.path().join("pr");
    let o = samic(&[
        "predict", "--checkpoint", s(&ckpt), "--context", s(&test[0].image), "--context-prompts", s(&test[0].prompts),
        "--target", s(&test[1].image), "--out", s(&pr),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = samic::prompts::PromptRecord::load(&pr.join("prompts.json")).unwrap();
    assert_eq!(rec.size, [32, 32]);
    assert!(!rec.instances.is_empty());
    assert!(pr.join("mask.png").is_file() && pr.join("heatmap.png").is_file());

    let orc = tmp.path().join("orc");
    assert!(samic(&["eval", "--dataset", s(&data), "--predictor", "oracle", "--name", "synth", "--out", s(&orc)]).status.success());
    let table = tmp.path().join("table");
    let o = samic(&["export", "--report", s(&ev.join("report.json")), "--report", s(&orc.join("report.json")), "--out", s(&table)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(table.join("table.txt")).unwrap();
    assert!(text.contains("SAMIC") && text.contains("Ground-truth heatmap") && text.contains("100.0"));
    assert_eq!(String::from_utf8_lossy(&o.stdout), text);
}

#[test]
fn net_eval_without_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("data"));
    let o = samic(&["eval", "--dataset", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
}

#[test]
fn annotation_sessions_export_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let img = common::save_png(tmp.path(), "cell.png", &common::disk_scene(32, 32, &[(16.0, 16.0, 6.0, [10, 200, 10])]));
    let id = {
        let svc = samic::annotation::AnnotationService::open(&root, Arc::new(samic::gateway::Gateway::mock())).unwrap();
        let info = svc.open_session(&[img], Some("cell")).unwrap();
        svc.wait_ready(&info.id, std::time::Duration::from_secs(10)).unwrap();
        svc.submit_prompt(&info.id, "cell", 0, samic_core::PointPrompt::new(16.0, 16.0)).unwrap();
        svc.commit(&info.id, "cell").unwrap();
        info.id
    };
    let out = tmp.path().join("exported");
    let o = samic(&["export", "--annotations", s(&root), "--session", &id, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = samic::dataset::load_split_manifest(&out, None).unwrap();
    assert_eq!(ds.items.len(), 1);
    assert_eq!(ds.classes, vec!["cell".to_string()]);
    assert_eq!(samic(&["export", "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn serve_answers_under_v1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_samic"))
        .args(["serve", "--addr", "127.0.0.1:0", "--out", s(tmp.path())])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").and_then(|r| r.strip_suffix("/v1")).unwrap().to_string();
    let mut conn = std::net::TcpStream::connect(&addr).unwrap();
    write!(conn, "GET /v1/sessions/s0001 HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 404"), "{resp}");
    assert!(resp.contains("\"error\""));
}
