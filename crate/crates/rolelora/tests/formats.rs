mod common;

use std::fs;

use rolelora::formats::{
    config_digest, grid_csv, load_config, load_dialogues, load_profile, load_script, save_dialogues, save_profile,
    ProfileFile,
};
use rolelora::CliError;
use rolelora_core::config::Config;
use rolelora_core::corpus::standard_vocabulary;
use rolelora_core::evalkit::PerplexityGrid;
use rolelora_core::gating::RoleProfile;
use rolelora_core::pipeline::synthetic_role;

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_dialogue_file_gives_no_roles() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "d.jsonl", "");
    assert!(load_dialogues(&p, &standard_vocabulary()).unwrap().is_empty());
}

#[test]
fn one_agent_turn_gives_one_training_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        &dir,
        "d.jsonl",
        r#"{"role":"Isolde Wren","turns":[{"speaker":"user","text":"hello"},{"speaker":"agent","text":"the night sky"}]}"#,
    );
    let map = load_dialogues(&p, &standard_vocabulary()).unwrap();
    let c = &map["Isolde Wren"];
    assert_eq!(c.train.len(), 1);
    assert!(c.heldout.is_empty());
    assert_eq!(c.train[0].len(), 3);
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"role":"a","turns":[{"speaker":"agent","text":"night"}]}"#;
    let p = write(&dir, "d.jsonl", &format!("{good}\n{good}\n{{not json\n"));
    match load_dialogues(&p, &standard_vocabulary()) {
        Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn unknown_speaker_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "d.jsonl", r#"{"role":"a","turns":[{"speaker":"narrator","text":"night"}]}"#);
    let err = load_dialogues(&p, &standard_vocabulary()).unwrap_err();
    assert!(err.to_string().contains("narrator"));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn synthetic_dialogues_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = standard_vocabulary();
    let (_, corpus) = synthetic_role(&common::small_config(), 4).unwrap();
    let p = dir.path().join("d.jsonl");
    save_dialogues(&p, &corpus, &vocab).unwrap();
    let map = load_dialogues(&p, &vocab).unwrap();
    let back = &map[&corpus.role];
    assert_eq!(back.train.len() + back.heldout.len(), corpus.train.len() + corpus.heldout.len());
    let mut a: Vec<_> = corpus.train.iter().chain(&corpus.heldout).cloned().collect();
    let mut b: Vec<_> = back.train.iter().chain(&back.heldout).cloned().collect();
    a.sort_by(|x, y| x.ids().cmp(y.ids()));
    b.sort_by(|x, y| x.ids().cmp(y.ids()));
    assert_eq!(a, b);
}

#[test]
fn partial_config_takes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "c.json", r#"{"adapter":{"learning_rate":0.2}}"#);
    assert_eq!(load_config(&p).unwrap(), Config::reference());
    assert_eq!(config_digest(&load_config(&p).unwrap()), config_digest(&Config::reference()));
}

#[test]
fn unknown_config_field_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "c.json", r#"{"adapter":{"rank":3}}"#);
    let err = load_config(&p).unwrap_err();
    assert!(matches!(err, CliError::Parse { .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn profile_round_trip_keeps_custom_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = RoleProfile::new("Isolde Wren", "Isolde Wren is a stargazer.");
    p.canonical_prompt = "Be Isolde".into();
    let path = dir.path().join("p.json");
    save_profile(&path, &p).unwrap();
    assert_eq!(load_profile(&path).unwrap(), p);
    let plain = RoleProfile::new("Isolde Wren", "x");
    assert_eq!(ProfileFile::from_profile(&plain).canonical_prompt, None);
}

#[test]
fn script_lines_parse() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        &dir,
        "s.jsonl",
        "{\"text\":\"I want you to act like Aldric Voss\",\"expected_role\":\"Aldric Voss\"}\n\n{\"text\":\"go on\",\"expected_role\":\"Aldric Voss\"}\n",
    );
    let turns = load_script(&p).unwrap();
    assert_eq!(turns.len(), 2);
    assert_eq!(turns[1].text, "go on");
}

#[test]
fn grid_csv_has_a_header_and_one_row_per_role() {
    let grid = PerplexityGrid {
        roles: vec!["A \"x\"".into(), "B".into()],
        base: vec![9.0, 8.0],
        cells: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
    };
    assert_eq!(grid_csv(&grid), "role,base,block_1,block_2\n\"A \"\"x\"\"\",9,1,2\n\"B\",8,3,4\n");
}
