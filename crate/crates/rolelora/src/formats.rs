//! JSON and JSONL file formats: config, role profiles, scripts, transcripts,
//! dialogue data, corpus dumps and evaluation reports.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rolelora_core::agent::{ScriptTurn, Speaker, Transcript};
use rolelora_core::backbone::{tokenize, TokenSequence, Vocabulary};
use rolelora_core::config::Config;
use rolelora_core::corpus::{from_records, to_records, CorpusRecord, RoleCorpus};
use rolelora_core::dynlora::Activation;
use rolelora_core::evalkit::{EvalReport, PerplexityGrid};
use rolelora_core::gating::{canonical_prompt, RoleProfile};
use rolelora_core::numerics::sha256_hex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(CliError::io(dir))?;
    tmp.write_all(bytes).map_err(CliError::io(path))?;
    tmp.as_file().sync_all().map_err(CliError::io(path))?;
    tmp.persist(path).map_err(|e| CliError::Io { path: path.into(), source: e.error })?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, e.line(), e))
}

/// Parses every non-blank line of a JSONL file. Errors cite the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::parse(path, i + 1, e))?);
    }
    Ok(out)
}

pub fn jsonl_bytes<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("in-memory serialisation");
        out.push(b'\n');
    }
    out
}

/// Reads and validates a config file. Absent fields take their defaults.
pub fn load_config(path: &Path) -> Result<Config> {
    let config: Config = read_json(path)?;
    config.validate()?;
    Ok(config)
}

/// SHA-256 of the config's JSON form.
pub fn config_digest(config: &Config) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serialises"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub name: String,
    pub profile: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_prompt: Option<String>,
}

impl ProfileFile {
    pub fn into_profile(self) -> RoleProfile {
        let mut p = RoleProfile::new(&self.name, &self.profile);
        if let Some(c) = self.canonical_prompt {
            p.canonical_prompt = c;
        }
        p
    }

    pub fn from_profile(p: &RoleProfile) -> Self {
        let canonical = (p.canonical_prompt != canonical_prompt(&p.name)).then(|| p.canonical_prompt.clone());
        ProfileFile { name: p.name.clone(), profile: p.profile_text.clone(), canonical_prompt: canonical }
    }
}

pub fn load_profile(path: &Path) -> Result<RoleProfile> {
    let file: ProfileFile = read_json(path)?;
    if file.name.trim().is_empty() {
        return Err(CliError::parse(path, 1, "profile name is empty"));
    }
    Ok(file.into_profile())
}

pub fn save_profile(path: &Path, profile: &RoleProfile) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(&ProfileFile::from_profile(profile)).expect("profile serialises");
    write_atomic(path, &bytes)
}

/// Script file: one `{"text", "expected_role"}` object per user turn.
pub fn load_script(path: &Path) -> Result<Vec<ScriptTurn>> {
    read_jsonl(path)
}

/// One transcript line. User lines carry the routing record, agent lines the
/// activation that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub turn: usize,
    pub speaker: Speaker,
    pub text: String,
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosines: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switched: Option<bool>,
}

pub fn transcript_lines(t: &Transcript) -> Vec<TranscriptLine> {
    t.conversation
        .turns
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            let rec = &t.records[i / 2];
            let user = turn.speaker == Speaker::User;
            TranscriptLine {
                turn: i / 2,
                speaker: turn.speaker,
                text: turn.text.clone(),
                role: turn.implied_role.clone(),
                activation: turn.activation.clone(),
                cosines: user.then(|| rec.cosines.clone()),
                switched: user.then_some(rec.switched),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DialogueLine {
    role: String,
    turns: Vec<DialogueTurnLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DialogueTurnLine {
    speaker: String,
    text: String,
}

/// Dialogue JSONL: `{"role", "turns": [{"speaker", "text"}]}` per line. Agent
/// turns become that role's sequences; ten or more sequences are split 90/10,
/// fewer all go to training.
pub fn load_dialogues(path: &Path, vocab: &Vocabulary) -> Result<BTreeMap<String, RoleCorpus>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut seqs: BTreeMap<String, Vec<TokenSequence>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DialogueLine = serde_json::from_str(&line).map_err(|e| CliError::parse(path, i + 1, e))?;
        let entry = seqs.entry(d.role.clone()).or_default();
        for t in d.turns {
            match t.speaker.as_str() {
                "user" => {}
                "agent" => {
                    let s = tokenize(&t.text, vocab);
                    if !s.is_empty() {
                        entry.push(s);
                    }
                }
                other => return Err(CliError::parse(path, i + 1, format!("unknown speaker {other:?}"))),
            }
        }
    }
    seqs.into_iter()
        .map(|(role, s)| {
            let corpus = if s.len() >= 10 {
                RoleCorpus::split(role.clone(), s)?
            } else {
                RoleCorpus { role: role.clone(), train: s, heldout: Vec::new() }
            };
            Ok((role, corpus))
        })
        .collect()
}

/// Writes every sequence of `corpus` (train then held-out) as a one-turn
/// dialogue.
pub fn save_dialogues(path: &Path, corpus: &RoleCorpus, vocab: &Vocabulary) -> Result<()> {
    let lines = corpus.train.iter().chain(&corpus.heldout).map(|s| DialogueLine {
        role: corpus.role.clone(),
        turns: vec![DialogueTurnLine { speaker: "agent".into(), text: s.to_text(vocab) }],
    });
    write_atomic(path, &jsonl_bytes(lines))
}

pub fn corpus_bytes(corpora: &[RoleCorpus], vocab: &Vocabulary) -> Vec<u8> {
    jsonl_bytes(corpora.iter().flat_map(|c| to_records(c, vocab)))
}

pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<RoleCorpus>> {
    let records: Vec<CorpusRecord> = read_jsonl(path)?;
    Ok(from_records(&records, vocab)?)
}

pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(report).expect("report serialises"))
}

/// `role,base,<block 1>,...` header then one row per role.
pub fn grid_csv(grid: &PerplexityGrid) -> String {
    let mut out = String::from("role,base");
    for k in 1..=grid.blocks() {
        out.push_str(&format!(",block_{k}"));
    }
    out.push('\n');
    for (i, row) in grid.cells.iter().enumerate() {
        out.push_str(&format!("\"{}\",{}", grid.roles[i].replace('"', "\"\""), grid.base[i]));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
