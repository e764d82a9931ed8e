//! Checkpoint directories: `manifest.json`, one little-endian `f64` file per
//! matrix and the role corpora as a JSONL dump. Every file is listed in the
//! manifest with its SHA-256 and checked on load.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rolelora_core::agent::AgentState;
use rolelora_core::backbone::{ModelState, Vocabulary, LAYER_NAMES};
use rolelora_core::config::Config;
use rolelora_core::corpus::RoleCorpus;
use rolelora_core::dynlora::{AdaptedLayer, BlockId, BlockLayout, LoraFactors, LoraMode, LoraModule};
use rolelora_core::gating::{GateState, RoleRecord, RoleRegistry};
use rolelora_core::numerics::{sha256_hex, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::{corpus_bytes, load_corpus};

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraEntry {
    pub layout: BlockLayout,
    pub mode: LoraMode,
    pub seed: u64,
    pub trained: Vec<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u64,
    pub config: Config,
    pub vocabulary: Vec<String>,
    pub context_window: usize,
    pub lora: LoraEntry,
    pub roles: Vec<RoleRecord>,
    pub matrices: Vec<MatrixEntry>,
    pub corpus: FileEntry,
}

/// An agent together with the corpora its roles were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: AgentState,
    pub corpora: Vec<RoleCorpus>,
}

fn lora_name(layer: AdaptedLayer, factor: &str) -> String {
    format!("lora.{}.{factor}", layer.name())
}

fn named_matrices(state: &AgentState) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> =
        state.model.layers().into_iter().map(|(name, m)| (format!("backbone.{name}"), m)).collect();
    for layer in AdaptedLayer::ALL {
        let f = state.lora.factors(layer);
        out.push((lora_name(layer, "B"), f.b()));
        out.push((lora_name(layer, "A"), f.a()));
    }
    out.push(("gate".into(), state.gate.matrix()));
    out
}

/// Builds the directory in a temporary sibling and renames it into place, so
/// `dir` is either the complete old checkpoint or the complete new one.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<Manifest> {
    let state = &ckpt.state;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(CliError::io(&parent))?;
    let tmp = tempfile::Builder::new().prefix(".ckpt-").tempdir_in(&parent).map_err(CliError::io(&parent))?;

    let mut matrices = Vec::new();
    for (name, m) in named_matrices(state) {
        let bytes = m.to_le_bytes();
        let file = format!("{name}.bin");
        fs::write(tmp.path().join(&file), &bytes).map_err(CliError::io(tmp.path().join(&file)))?;
        matrices.push(MatrixEntry { name, file, rows: m.rows(), cols: m.cols(), sha256: sha256_hex(&bytes) });
    }
    let corpus = corpus_bytes(&ckpt.corpora, state.model.vocab());
    fs::write(tmp.path().join(CORPUS_FILE), &corpus).map_err(CliError::io(tmp.path().join(CORPUS_FILE)))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        vocabulary: state.model.vocab().tokens().to_vec(),
        context_window: state.model.context_window(),
        lora: LoraEntry {
            layout: *state.lora.layout(),
            mode: state.lora.mode(),
            seed: state.lora.seed(),
            trained: state.lora.trained_blocks().iter().copied().collect(),
        },
        roles: state.registry.roles().to_vec(),
        matrices,
        corpus: FileEntry { file: CORPUS_FILE.into(), sha256: sha256_hex(&corpus) },
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    fs::write(tmp.path().join(MANIFEST), json).map_err(CliError::io(tmp.path().join(MANIFEST)))?;

    let staged = tmp.keep();
    let backup = parent.join(format!(".ckpt-old-{}", std::process::id()));
    let had_old = dir.exists();
    if had_old {
        fs::rename(dir, &backup).map_err(CliError::io(dir))?;
    }
    if let Err(e) = fs::rename(&staged, dir) {
        if had_old {
            let _ = fs::rename(&backup, dir);
        }
        let _ = fs::remove_dir_all(&staged);
        return Err(CliError::Io { path: dir.into(), source: e });
    }
    if had_old {
        fs::remove_dir_all(&backup).map_err(CliError::io(&backup))?;
    }
    Ok(manifest)
}

/// Reads the manifest alone, rejecting other format versions before the rest
/// of it is interpreted.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(CliError::MissingManifest(dir.into()));
    }
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::parse(&path, e.line(), e))?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
    if found != FORMAT_VERSION {
        return Err(CliError::Version { found, expected: FORMAT_VERSION });
    }
    serde_json::from_value(value).map_err(|e| CliError::parse(&path, 0, e))
}

fn read_checked(dir: &Path, file: &str, digest: &str, name: &str) -> Result<Vec<u8>> {
    if file.contains(['/', '\\']) || file.starts_with('.') {
        return Err(CliError::Invalid(format!("manifest file name {file:?} leaves the checkpoint")));
    }
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    if sha256_hex(&bytes) != digest {
        return Err(CliError::DigestMismatch(name.into()));
    }
    Ok(bytes)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let mut matrices = std::collections::BTreeMap::new();
    for e in &manifest.matrices {
        let bytes = read_checked(dir, &e.file, &e.sha256, &e.name)?;
        matrices.insert(e.name.clone(), Matrix::from_le_bytes(e.rows, e.cols, &bytes)?);
    }
    let mut take = |name: &str| {
        matrices.remove(name).ok_or_else(|| CliError::Invalid(format!("manifest lists no matrix {name:?}")))
    };

    let vocab = Vocabulary::from_full_list(manifest.vocabulary.clone())?;
    let layers = LAYER_NAMES.iter().map(|n| take(&format!("backbone.{n}"))).collect::<Result<Vec<_>>>()?;
    let model = ModelState::from_parts(vocab, manifest.context_window, layers)?;

    let mut factors = Vec::new();
    for layer in AdaptedLayer::ALL {
        factors.push(LoraFactors::new(take(&lora_name(layer, "B"))?, take(&lora_name(layer, "A"))?)?);
    }
    let output = factors.pop().expect("two layers");
    let hidden = factors.pop().expect("two layers");
    let trained: BTreeSet<BlockId> = manifest.lora.trained.iter().copied().collect();
    let lora =
        LoraModule::from_parts(manifest.lora.layout, manifest.lora.mode, hidden, output, trained, manifest.lora.seed)?;

    let gate = GateState::from_matrix(take("gate")?)?;
    let registry = RoleRegistry::from_records(manifest.config.embedder(), manifest.roles.clone(), &gate)?;
    if !matrices.is_empty() {
        let extra: Vec<String> = matrices.into_keys().collect();
        return Err(CliError::Invalid(format!("manifest lists unknown matrices {extra:?}")));
    }

    read_checked(dir, &manifest.corpus.file, &manifest.corpus.sha256, &manifest.corpus.file)?;
    let corpora = load_corpus(&dir.join(&manifest.corpus.file), model.vocab())?;

    Ok(Checkpoint { state: AgentState { model, lora, registry, gate, config: manifest.config }, corpora })
}
