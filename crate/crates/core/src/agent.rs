//! The multi-character dialogue loop.
//!
//! Each user turn is routed; the agent switches role only when the best
//! stage-1 cosine clears the switch threshold and beats the current role's
//! cosine. The reply is decoded greedily from the tail of the tagged
//! conversation history with the active role's adapter attached.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{greedy_decode, tokenize, ModelState, TokenSequence, UNK};
use crate::config::Config;
use crate::corpus::{AGENT_TAG, USER_TAG};
use crate::dynlora::{Activation, AdapterView, LoraModule};
use crate::error::{Error, Result};
use crate::gating::{retrieval_cosines, route_role, GateState, RoleRegistry};
use crate::numerics::argmax;

const META_WORDS: [&str; 6] = ["i", "want", "you", "to", "act", "like"];

/// A user instruction split into the requested character (if the meta
/// prompt template was used) and the remaining instruction text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub character: Option<String>,
    pub instruction: String,
}

/// Recognises `I want you to act like {character}` case-insensitively. The
/// name runs up to the first sentence punctuation; whatever follows is the
/// residual instruction. Any other text is returned whole as the instruction.
pub fn parse_meta_prompt(text: &str) -> ParsedPrompt {
    let words: Vec<&str> = text.split_whitespace().collect();
    let matches =
        words.len() > META_WORDS.len() && words.iter().zip(META_WORDS).all(|(w, m)| w.eq_ignore_ascii_case(m));
    if !matches {
        return ParsedPrompt { character: None, instruction: text.trim().to_string() };
    }
    let rest = words[META_WORDS.len()..].join(" ");
    let cut = rest.find(['.', ',', '!', '?', ';', ':']).unwrap_or(rest.len());
    let name = rest[..cut].trim();
    if name.is_empty() {
        return ParsedPrompt { character: None, instruction: text.trim().to_string() };
    }
    let residual = rest[cut..].trim_start_matches(['.', ',', '!', '?', ';', ':']).trim();
    ParsedPrompt { character: Some(name.to_string()), instruction: residual.to_string() }
}

/// Everything needed to serve a conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub model: ModelState,
    pub lora: LoraModule,
    pub registry: RoleRegistry,
    pub gate: GateState,
    pub config: Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
    pub implied_role: Option<String>,
    /// Set on agent turns only.
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<DialogueTurn>,
    pub current_role: Option<usize>,
}

/// Routing decision for one user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub best_role: usize,
    pub best_cosine: f64,
    pub cosines: Vec<f64>,
    pub switched: bool,
    pub active_role: Option<usize>,
    pub active_role_name: Option<String>,
    pub activation: Activation,
    pub gate_disagrees: bool,
    pub untrained_block: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub turn: DialogueTurn,
    pub record: TurnRecord,
}

fn history_tokens(conv: &Conversation, model: &ModelState) -> Vec<usize> {
    let vocab = model.vocab();
    let mut out = Vec::new();
    for t in &conv.turns {
        let tag = match t.speaker {
            Speaker::User => USER_TAG,
            Speaker::Agent => AGENT_TAG,
        };
        out.push(vocab.id(tag).unwrap_or(UNK));
        out.extend(tokenize(&t.text, vocab).ids());
    }
    out
}

/// Routes `user_text`, appends the user turn and the generated agent turn to
/// `conv`, and returns the agent turn with its routing record.
pub fn respond(state: &AgentState, user_text: &str, conv: &mut Conversation, max_tokens: usize) -> Result<Reply> {
    if state.registry.is_empty() {
        return Err(Error::NoRoles);
    }
    if max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    let cosines = retrieval_cosines(&state.registry, user_text);
    let best = argmax(&cosines);
    let best_cosine = cosines[best];
    let threshold = state.config.agent.switch_threshold;
    let switched = best_cosine > threshold
        && match conv.current_role {
            None => true,
            Some(cur) => cur != best && best_cosine > cosines[cur],
        };
    let active_role = if switched { Some(best) } else { conv.current_role };

    let (activation, gate_disagrees) = match active_role {
        Some(r) => {
            let route = route_role(&state.registry, &state.gate, r, cosines.clone())?;
            (route.activation, route.gate_disagrees)
        }
        None => (Activation::None, false),
    };
    let view = AdapterView::new(&state.lora, activation.clone())?;
    let role_name = active_role.map(|r| state.registry.roles()[r].profile.name.clone());

    conv.turns.push(DialogueTurn {
        speaker: Speaker::User,
        text: user_text.to_string(),
        implied_role: if switched { role_name.clone() } else { None },
        activation: None,
    });
    conv.current_role = active_role;

    let mut ctx = history_tokens(conv, &state.model);
    ctx.push(state.model.vocab().id(AGENT_TAG).unwrap_or(UNK));
    let start = ctx.len().saturating_sub(state.model.context_window());
    let generated = greedy_decode(&ctx[start..], &state.model, Some(&view), max_tokens)?;
    let text = TokenSequence(generated).to_text(state.model.vocab());

    let turn =
        DialogueTurn { speaker: Speaker::Agent, text, implied_role: role_name, activation: Some(activation.clone()) };
    conv.turns.push(turn.clone());
    let record = TurnRecord {
        best_role: best,
        best_cosine,
        cosines,
        switched,
        active_role,
        active_role_name: conv.current_role.map(|r| state.registry.roles()[r].profile.name.clone()),
        activation,
        gate_disagrees,
        untrained_block: !view.untrained_blocks().is_empty(),
    };
    Ok(Reply { turn, record })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub text: String,
    pub expected_role: Option<String>,
}

/// Replay of a script: the full conversation and one record per user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub conversation: Conversation,
    pub records: Vec<TurnRecord>,
    pub expected: Vec<Option<String>>,
}

impl Transcript {
    /// Generated text answering user turn `i`.
    pub fn reply(&self, i: usize) -> &str {
        &self.conversation.turns[2 * i + 1].text
    }
}

/// Replays `script` from an empty conversation.
pub fn run_script(state: &AgentState, script: &[ScriptTurn], max_tokens: usize) -> Result<Transcript> {
    if script.is_empty() {
        return Err(Error::invalid("script is empty"));
    }
    let mut conversation = Conversation::default();
    let mut records = Vec::with_capacity(script.len());
    for (i, turn) in script.iter().enumerate() {
        let reply = respond(state, &turn.text, &mut conversation, max_tokens)
            .map_err(|e| Error::AtTurn { turn: i, source: alloc::boxed::Box::new(e) })?;
        records.push(reply.record);
    }
    Ok(Transcript { conversation, records, expected: script.iter().map(|t| t.expected_role.clone()).collect() })
}

impl core::fmt::Display for Speaker {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Speaker::User => "user",
            Speaker::Agent => "agent",
        })
    }
}

/// `"[role] text"` rendering of an agent turn.
pub fn render_agent_turn(turn: &DialogueTurn) -> String {
    format!("[{}] {}", turn.implied_role.as_deref().unwrap_or("base"), turn.text)
}
