mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn rolelora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rolelora")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, serde_json::to_vec(&common::small_config()).unwrap()).unwrap();
    let ckpt = dir.path().join("ck");
    let out = rolelora(&["pretrain", "--config", s(&config), "--out", s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Fixture { dir, config, ckpt }
}

#[test]
fn pretrain_reports_every_matrix() {
    let f = fixture();
    let out = rolelora(&["pretrain", "--config", s(&f.config), "--out", s(&f.dir.path().join("again"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["roles"], 3);
    assert_eq!(v["matrices"].as_array().unwrap().len(), 10);
    assert_eq!(
        fs::read(f.ckpt.join("manifest.json")).unwrap(),
        fs::read(f.dir.path().join("again/manifest.json")).unwrap()
    );
}

#[test]
fn add_role_both_strategies() {
    let f = fixture();
    let (profile, data) = (f.dir.path().join("p.json"), f.dir.path().join("d.jsonl"));
    let out = rolelora(&[
        "synth-role",
        "--config",
        s(&f.config),
        "--index",
        "4",
        "--profile",
        s(&profile),
        "--data",
        s(&data),
    ]);
    assert!(out.status.success());

    let fused = f.dir.path().join("fused");
    let out = rolelora(&[
        "add-role",
        "--ckpt",
        s(&f.ckpt),
        "--profile",
        s(&profile),
        "--strategy",
        "fusion",
        "--out",
        s(&fused),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["strategy"], "fusion");
    assert_eq!(v["fusion_weights"].as_array().unwrap().len(), 3);

    let out = rolelora(&[
        "add-role",
        "--ckpt",
        s(&f.ckpt),
        "--profile",
        s(&profile),
        "--strategy",
        "expansion",
        "--out",
        s(&fused),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["exit_code"], 2);

    let grown = f.dir.path().join("grown");
    let out = rolelora(&[
        "add-role",
        "--ckpt",
        s(&f.ckpt),
        "--profile",
        s(&profile),
        "--strategy",
        "expansion",
        "--data",
        s(&data),
        "--out",
        s(&grown),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["gate_growth"], serde_json::json!([3, 4]));
    assert_eq!(v["blocks_frozen_verified"], true);
}

#[test]
fn chat_script_writes_a_transcript() {
    let f = fixture();
    let script = f.dir.path().join("s.jsonl");
    let manifest = rolelora::checkpoint::read_manifest(&f.ckpt).unwrap();
    let name = &manifest.roles[1].profile.name;
    fs::write(&script, format!("{{\"text\":\"I want you to act like {name}\",\"expected_role\":\"{name}\"}}\n"))
        .unwrap();
    let out = rolelora(&["chat", "--ckpt", s(&f.ckpt), "--script", s(&script), "--max-tokens", "3"]);
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["speaker"], "user");
    assert_eq!(lines[0]["switched"], true);
    assert_eq!(lines[1]["speaker"], "agent");
    assert_eq!(lines[1]["role"], name.as_str());
    assert!(lines[1]["text"].as_str().unwrap().split_whitespace().count() <= 3);
}

#[test]
fn interactive_chat_tags_replies_with_the_role() {
    let f = fixture();
    let manifest = rolelora::checkpoint::read_manifest(&f.ckpt).unwrap();
    let name = manifest.roles[0].profile.name.clone();
    let mut child = Command::new(env!("CARGO_BIN_EXE_rolelora"))
        .args(["chat", "--ckpt", s(&f.ckpt)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    writeln!(child.stdin.take().unwrap(), "I want you to act like {name}\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with(&format!("[{name}]")));
}

#[test]
fn eval_writes_report_and_grid() {
    let f = fixture();
    let report = f.dir.path().join("report.json");
    let out = rolelora(&["eval", "--ckpt", s(&f.ckpt), "--suite", "grid", "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["perplexity_grid"]["roles"].as_array().unwrap().len(), 3);
    assert!(v["gating_accuracy"].is_null());
    assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
    let csv = fs::read_to_string(f.dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn gradcheck_passes() {
    let f = fixture();
    let out = rolelora(&["gradcheck", "--config", s(&f.config)]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().lines().count() >= 20);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = rolelora(&["chat", "--ckpt", s(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "missing_manifest");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"agent":{"max_tokens":0}}"#).unwrap();
    let out = rolelora(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());

    fs::write(&bad, "{").unwrap();
    let out = rolelora(&["gradcheck", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));

    let out = rolelora(&["add-role", "--strategy", "merge"]);
    assert_eq!(out.status.code(), Some(2));

    let out = rolelora(&["gradcheck", "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!(out.status.code(), Some(4));
}
