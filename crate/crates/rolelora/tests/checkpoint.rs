mod common;

use std::fs;

use rolelora::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, FORMAT_VERSION, MANIFEST};
use rolelora::CliError;
use rolelora_core::dynlora::{Activation, BlockId};
use rolelora_core::evalkit::perplexity;
use rolelora_core::incremental::{expand_role, fuse_role};
use rolelora_core::pipeline::synthetic_role;

use common::{small_checkpoint, small_config};

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_checkpoint();
    let manifest = save_checkpoint(&ckpt, &dir.path().join("a")).unwrap();
    assert_eq!(manifest.format_version, FORMAT_VERSION);
    assert_eq!(manifest.matrices.len(), 10);
    let loaded = load_checkpoint(&dir.path().join("a")).unwrap();
    assert_eq!(loaded, ckpt);
    let again = save_checkpoint(&loaded, &dir.path().join("b")).unwrap();
    assert_eq!(again, manifest);
}

#[test]
fn saving_over_an_existing_checkpoint_replaces_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    let mut ckpt = small_checkpoint();
    save_checkpoint(&ckpt, &path).unwrap();
    let (spec, _) = synthetic_role(&small_config(), 4).unwrap();
    fuse_role(&mut ckpt.state, spec.profile()).unwrap();
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().state.registry.len(), 4);
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers, vec![std::ffi::OsString::from("ck")]);
}

#[test]
fn tampered_matrix_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&small_checkpoint(), dir.path()).unwrap();
    let bin = dir.path().join("gate.bin");
    let mut bytes = fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x80;
    fs::write(&bin, bytes).unwrap();
    match load_checkpoint(dir.path()) {
        Err(CliError::DigestMismatch(name)) => assert_eq!(name, "gate"),
        other => panic!("expected digest mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn tampered_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&small_checkpoint(), dir.path()).unwrap();
    let path = dir.path().join("corpus.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(CliError::DigestMismatch(_))));
}

#[test]
fn unknown_format_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&small_checkpoint(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap().replacen("\"format_version\": 1", "\"format_version\": 7", 1);
    fs::write(&path, text).unwrap();
    match read_manifest(dir.path()) {
        Err(CliError::Version { found: 7, expected }) => assert_eq!(expected, FORMAT_VERSION),
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn empty_directory_has_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(err, CliError::MissingManifest(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn manifest_paths_cannot_leave_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&small_checkpoint(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&path).unwrap().replacen("\"gate.bin\"", "\"../gate.bin\"", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(CliError::Invalid(_))));
}

#[test]
fn fused_role_survives_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = small_checkpoint();
    let (spec, corpus) = synthetic_role(&small_config(), 4).unwrap();
    fuse_role(&mut ckpt.state, spec.profile()).unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let role = &loaded.state.registry.roles()[3];
    assert!(matches!(role.activation, Activation::Fusion(_)));
    let a = perplexity(&ckpt.state, &role.activation, &corpus.heldout).unwrap();
    let b = perplexity(&loaded.state, &role.activation, &corpus.heldout).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn expanded_checkpoint_records_the_new_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt = small_checkpoint();
    let config = small_config();
    let (spec, corpus) = synthetic_role(&config, 4).unwrap();
    expand_role(&mut ckpt.state, spec.profile(), &corpus.train, config.adapter.learning_rate, config.adapter.epochs)
        .unwrap();
    ckpt.corpora.push(corpus);
    let manifest = save_checkpoint(&ckpt, dir.path()).unwrap();
    assert_eq!(manifest.lora.layout.roles(), 4);
    assert_eq!(manifest.lora.layout.total_rank(), 8);
    assert_eq!(manifest.config.layout, manifest.lora.layout);
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert!(loaded.state.lora.is_trained(BlockId::from_index(3)));
    assert_eq!(loaded, ckpt);
}
