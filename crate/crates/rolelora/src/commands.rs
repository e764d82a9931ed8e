//! The work behind each subcommand, with output going to a caller-supplied
//! writer.

use std::io::{BufRead, Write};
use std::path::Path;

use rolelora_core::agent::{render_agent_turn, respond, run_script, Conversation};
use rolelora_core::evalkit::{evaluate, Suite};
use rolelora_core::gradcheck::run_gradient_checks;
use rolelora_core::incremental::{expand_role, fuse_role, IncrementalReport, Strategy};
use rolelora_core::pipeline::{pretune, synthetic_role};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{CliError, Result};
use crate::formats::{
    config_digest, grid_csv, jsonl_bytes, load_config, load_dialogues, load_profile, load_script, save_dialogues,
    save_profile, save_report, transcript_lines, write_atomic,
};

/// Seeds used by the `gradcheck` command.
pub const GRADCHECK_SEEDS: usize = 20;

fn emit<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).expect("serialisable");
    line.push(b'\n');
    out.write_all(&line).map_err(CliError::io("<stdout>"))
}

#[derive(Serialize)]
struct Saved<'a> {
    checkpoint: &'a Path,
    roles: usize,
    blocks: usize,
    matrices: Vec<(&'a str, &'a str)>,
}

pub fn pretrain(config: &Path, out_dir: &Path, out: &mut impl Write) -> Result<()> {
    let config = load_config(config)?;
    let p = pretune(&config)?;
    let ckpt = Checkpoint { state: p.state, corpora: p.corpora };
    let manifest = save_checkpoint(&ckpt, out_dir)?;
    emit(
        out,
        &Saved {
            checkpoint: out_dir,
            roles: manifest.roles.len(),
            blocks: manifest.lora.layout.roles(),
            matrices: manifest.matrices.iter().map(|m| (m.name.as_str(), m.sha256.as_str())).collect(),
        },
    )
}

pub fn add_role(
    ckpt_dir: &Path,
    profile: &Path,
    strategy: Strategy,
    data: Option<&Path>,
    out_dir: &Path,
    out: &mut impl Write,
) -> Result<IncrementalReport> {
    let mut ckpt = load_checkpoint(ckpt_dir)?;
    let profile = load_profile(profile)?;
    let report = match strategy {
        Strategy::Fusion => {
            if data.is_some() {
                log::warn!("fusion is data-free; ignoring --data");
            }
            fuse_role(&mut ckpt.state, profile)?
        }
        Strategy::Expansion => {
            let data = data.ok_or_else(|| CliError::Invalid("expansion needs --data".into()))?;
            let mut corpora = load_dialogues(data, ckpt.state.model.vocab())?;
            let mut corpus = match corpora.remove(&profile.name) {
                Some(c) => c,
                None if corpora.len() == 1 => corpora.into_values().next().expect("one entry"),
                None => {
                    return Err(CliError::Invalid(format!(
                        "{} has no dialogues for role {:?}",
                        data.display(),
                        profile.name
                    )))
                }
            };
            corpus.role = profile.name.clone();
            let a = ckpt.state.config.adapter.clone();
            let report = expand_role(&mut ckpt.state, profile, &corpus.train, a.learning_rate, a.epochs)?;
            ckpt.corpora.push(corpus);
            report
        }
    };
    save_checkpoint(&ckpt, out_dir)?;
    emit(out, &report)?;
    Ok(report)
}

/// With a script, replays it and prints the transcript as JSONL. Without one,
/// answers each line of `input` until it ends.
pub fn chat(
    ckpt_dir: &Path,
    script: Option<&Path>,
    max_tokens: Option<usize>,
    input: &mut impl BufRead,
    out: &mut impl Write,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let state = &ckpt.state;
    let max_tokens = max_tokens.unwrap_or(state.config.agent.max_tokens);
    if let Some(script) = script {
        let turns = load_script(script)?;
        let transcript = run_script(state, &turns, max_tokens)?;
        out.write_all(&jsonl_bytes(transcript_lines(&transcript))).map_err(CliError::io("<stdout>"))?;
        return Ok(());
    }
    let mut conv = Conversation::default();
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line).map_err(CliError::io("<stdin>"))? == 0 {
            return Ok(());
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let reply = respond(state, text, &mut conv, max_tokens)?;
        writeln!(out, "{}", render_agent_turn(&reply.turn)).map_err(CliError::io("<stdout>"))?;
        out.flush().map_err(CliError::io("<stdout>"))?;
    }
}

/// Writes the report JSON to `report` and, when a grid was computed, the grid
/// as CSV next to it with a `.csv` extension.
pub fn eval(ckpt_dir: &Path, suite: Suite, report: &Path, out: &mut impl Write) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let digest = config_digest(&ckpt.state.config);
    let r = evaluate(&ckpt.state, &ckpt.corpora, suite, &digest)?;
    save_report(report, &r)?;
    if let Some(grid) = &r.perplexity_grid {
        write_atomic(&report.with_extension("csv"), grid_csv(grid).as_bytes())?;
    }
    emit(out, &r)
}

pub fn gradcheck(config: &Path, out: &mut impl Write) -> Result<()> {
    let config = load_config(config)?;
    let checks = run_gradient_checks(config.seeds.master, GRADCHECK_SEEDS)?;
    for c in &checks {
        emit(out, c)?;
    }
    match checks.iter().filter(|c| !c.passed()).count() {
        0 => Ok(()),
        failed => Err(CliError::GradCheck { failed }),
    }
}

/// Writes the profile and dialogue data of synthetic character `index`, for
/// use with `add-role`.
pub fn synth_role(config: &Path, index: usize, profile: &Path, data: &Path, out: &mut impl Write) -> Result<()> {
    let config = load_config(config)?;
    let (spec, corpus) = synthetic_role(&config, index)?;
    save_profile(profile, &spec.profile())?;
    save_dialogues(data, &corpus, &rolelora_core::corpus::standard_vocabulary())?;
    emit(out, &crate::formats::ProfileFile::from_profile(&spec.profile()))
}
