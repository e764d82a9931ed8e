//! Judge-free quality proxies: held-out perplexity grids, routing accuracy,
//! forgetting deltas and transfer/stability scores over scripted dialogues.
//!
//! Proxy mapping: character behaviour and utterance style are approximated by
//! the perplexity grid and the style-presence check. Knowledge and relevance
//! dimensions have no analogue over a synthetic vocabulary and are not scored.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agent::{run_script, AgentState, ScriptTurn, Transcript};
use crate::backbone::{corpus_loss_sum, ModelState, TokenSequence, Vocabulary};
use crate::corpus::{distinctive_tokens, RoleCorpus};
use crate::dynlora::{train_shared_baseline, Activation, AdapterView, BlockId, LoraModule};
use crate::error::{Error, Result};
use crate::gating::{embedding_tokens, retrieval_cosines, route, GateState, RoleRegistry};
use crate::rng;

/// Notes written into every report so proxy scores are not read as judge
/// scores.
pub const PROXY_NOTES: [&str; 3] = [
    "behaviour and utterance style: perplexity grid and style presence",
    "virtual, real and hallucinated knowledge: not scored",
    "relevance: not scored",
];

/// exp of the mean next-token cross-entropy of `corpus` under `activation`.
pub fn perplexity(state: &AgentState, activation: &Activation, corpus: &[TokenSequence]) -> Result<f64> {
    let view = AdapterView::new(&state.lora, activation.clone())?;
    perplexity_with(&state.model, Some(&view), corpus)
}

fn perplexity_with(model: &ModelState, view: Option<&AdapterView<'_>>, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    let (sum, n) = corpus_loss_sum(corpus, model, view)?;
    Ok(libm::exp(sum / n as f64))
}

/// Held-out perplexity of every role (rows) under every block (columns), plus
/// the unadapted base model per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityGrid {
    pub roles: Vec<String>,
    pub base: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
}

impl PerplexityGrid {
    pub fn blocks(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    /// Entry `(i, i)` for every role that has a same-index block.
    pub fn diagonal(&self) -> Vec<f64> {
        self.cells.iter().enumerate().filter(|(i, row)| *i < row.len()).map(|(i, row)| row[i]).collect()
    }

    /// Every row's strict minimum is on the diagonal and beats the base.
    pub fn diagonal_dominant(&self) -> bool {
        self.cells.iter().enumerate().all(|(i, row)| {
            i < row.len() && row[i] < self.base[i] && row.iter().enumerate().all(|(j, &v)| j == i || row[i] < v)
        })
    }
}

/// Grid over `corpora` (held-out split) and every block of `state.lora`.
pub fn perplexity_grid(state: &AgentState, corpora: &[RoleCorpus]) -> Result<PerplexityGrid> {
    let blocks: Vec<BlockId> = state.lora.layout().blocks().collect();
    let mut cells = Vec::with_capacity(corpora.len());
    let mut base = Vec::with_capacity(corpora.len());
    for c in corpora {
        base.push(perplexity_with(&state.model, None, &c.heldout)?);
        let row =
            blocks.iter().map(|&k| perplexity(state, &Activation::Block(k), &c.heldout)).collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    Ok(PerplexityGrid { roles: corpora.iter().map(|c| c.role.clone()).collect(), base, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    pub role: String,
    pub before: f64,
    pub after: f64,
    /// Relative perplexity change.
    pub relative: f64,
    /// Relative change of the mean cross-entropy, `ln` of the perplexities.
    pub relative_loss: f64,
}

impl ForgettingEntry {
    pub fn new(role: &str, before: f64, after: f64) -> Self {
        let (lb, la) = (libm::log(before), libm::log(after));
        ForgettingEntry {
            role: role.to_string(),
            before,
            after,
            relative: (after - before) / before,
            relative_loss: if lb == 0.0 { 0.0 } else { (la - lb) / lb },
        }
    }
}

/// Relative change of each role's own-block perplexity between two grids.
pub fn forgetting_report(before: &PerplexityGrid, after: &PerplexityGrid) -> Result<Vec<ForgettingEntry>> {
    if before.roles != after.roles || before.blocks() > after.blocks() {
        return Err(Error::invalid("grids cover different roles"));
    }
    Ok(before
        .diagonal()
        .into_iter()
        .zip(after.diagonal())
        .zip(&before.roles)
        .map(|((b, a), role)| ForgettingEntry::new(role, b, a))
        .collect())
}

/// The single-block comparator trained on `corpora[0]` and then on
/// `corpora[1]`: the first role's held-out perplexity before and after the
/// second role is learned.
pub fn shared_baseline_forgetting(state: &AgentState, corpora: &[RoleCorpus]) -> Result<ForgettingEntry> {
    if corpora.len() < 2 {
        return Err(Error::invalid("the forgetting comparison needs two roles"));
    }
    let cfg = &state.config;
    let rank = cfg.adapter.baseline_rank;
    let train = |n: usize| -> Result<LoraModule> {
        let mut m = LoraModule::shared_baseline(rank, rank as f64, &state.model, cfg.seeds.lora)?;
        let sets: Vec<&[TokenSequence]> = corpora[..n].iter().map(|c| &c.train[..]).collect();
        train_shared_baseline(
            &mut m,
            &state.model,
            &sets,
            cfg.adapter.learning_rate,
            cfg.adapter.epochs,
            cfg.seeds.lora,
        )?;
        Ok(m)
    };
    let only = Activation::Block(BlockId::from_index(0));
    let first = train(1)?;
    let both = train(2)?;
    let before = perplexity_with(&state.model, Some(&AdapterView::new(&first, only.clone())?), &corpora[0].heldout)?;
    let after = perplexity_with(&state.model, Some(&AdapterView::new(&both, only)?), &corpora[0].heldout)?;
    Ok(ForgettingEntry::new(&corpora[0].role, before, after))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub text: String,
    pub role: String,
}

/// Filler words that never appear in a profile; paraphrases pad with these.
const FILLERS: [&str; 12] =
    ["please", "become", "play", "portray", "speak", "talk", "now", "as", "me", "the", "role", "of"];

fn profile_token_sets(registry: &RoleRegistry) -> Vec<BTreeSet<String>> {
    registry.roles().iter().map(|r| embedding_tokens(&r.profile.profile_text).collect()).collect()
}

/// A seeded rewording of role `role`'s profile: at least half of its tokens
/// come from that profile alone, the rest are fillers found in no profile.
pub fn paraphrase(registry: &RoleRegistry, role: usize, seed: u64) -> Result<String> {
    let sets = profile_token_sets(registry);
    let own = sets.get(role).ok_or_else(|| Error::invalid(format!("no role {role}")))?;
    let unique: Vec<&String> =
        own.iter().filter(|t| sets.iter().enumerate().all(|(j, s)| j == role || !s.contains(*t))).collect();
    if unique.is_empty() {
        return Err(Error::invalid(format!("role {role} has no profile tokens of its own")));
    }
    let fillers: Vec<&str> = FILLERS.iter().copied().filter(|f| sets.iter().all(|s| !s.contains(*f))).collect();
    let mut r = rng::stream(rng::derive(seed, role as u64), 11);
    let keep = r.random_range(unique.len().div_ceil(2)..=unique.len());
    let mut words: Vec<&str> = unique.choose_multiple(&mut r, keep).map(|s| s.as_str()).collect();
    let pad = r.random_range(0..=keep.min(fillers.len()));
    words.extend(fillers.choose_multiple(&mut r, pad));
    words.shuffle(&mut r);
    Ok(words.join(" "))
}

/// Canonical prompt plus `paraphrases` seeded rewordings per role.
pub fn prompt_suite(registry: &RoleRegistry, paraphrases: usize, seed: u64) -> Result<Vec<LabeledPrompt>> {
    let mut out = Vec::new();
    for (i, r) in registry.roles().iter().enumerate() {
        let name = &r.profile.name;
        out.push(LabeledPrompt { text: r.profile.canonical_prompt.clone(), role: name.clone() });
        for p in 0..paraphrases {
            let text = paraphrase(registry, i, rng::derive(seed, p as u64))?;
            out.push(LabeledPrompt { text, role: name.clone() });
        }
    }
    Ok(out)
}

/// Fraction of prompts routed to the labelled role's activation without the
/// gate disagreeing.
pub fn gating_accuracy(registry: &RoleRegistry, gate: &GateState, prompts: &[LabeledPrompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts"));
    }
    let mut hits = 0usize;
    for p in prompts {
        let want = registry.find(&p.role).ok_or_else(|| Error::invalid(format!("unknown role {:?}", p.role)))?;
        let got = route(registry, gate, &p.text)?;
        if got.activation == registry.roles()[want].activation && !got.gate_disagrees {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}

/// Follow-up lines used between role prompts.
pub const FOLLOW_UPS: [&str; 6] =
    ["Tell me more.", "Go on.", "What happened next?", "Why do you say that?", "And then?", "How did that feel?"];

/// Follow-ups whose best cosine against every role stays at or below the
/// switch threshold, so they never move the agent.
pub fn neutral_follow_ups(registry: &RoleRegistry, threshold: f64) -> Result<Vec<&'static str>> {
    let out: Vec<&str> =
        FOLLOW_UPS.iter().copied().filter(|f| retrieval_cosines(registry, f).iter().all(|&c| c <= threshold)).collect();
    if out.is_empty() {
        return Err(Error::invalid("every follow-up line routes to a role"));
    }
    Ok(out)
}

fn round(registry: &RoleRegistry, role: usize, follow_ups: &[&str], r: &mut rng::Rng) -> [ScriptTurn; 2] {
    let p = &registry.roles()[role].profile;
    let name = Some(p.name.clone());
    [
        ScriptTurn { text: p.canonical_prompt.clone(), expected_role: name.clone() },
        ScriptTurn { text: follow_ups.choose(r).expect("non-empty").to_string(), expected_role: name },
    ]
}

/// `n` scripts of `rounds` rounds, each alternating between two distinct
/// roles. A round is the role's canonical prompt and a neutral follow-up.
pub fn alternating_scripts(
    registry: &RoleRegistry,
    n: usize,
    rounds: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<Vec<ScriptTurn>>> {
    if registry.len() < 2 {
        return Err(Error::invalid("alternating scripts need two roles"));
    }
    let follow = neutral_follow_ups(registry, threshold)?;
    let roles: Vec<usize> = (0..registry.len()).collect();
    Ok((0..n)
        .map(|s| {
            let mut r = rng::stream(rng::derive(seed, s as u64), 12);
            let pair: Vec<usize> = roles.choose_multiple(&mut r, 2).copied().collect();
            (0..rounds).flat_map(|i| round(registry, pair[i % 2], &follow, &mut r)).collect()
        })
        .collect())
}

/// `per_role × roles` scripts whose every round picks a role at random.
pub fn random_role_suite(
    registry: &RoleRegistry,
    per_role: usize,
    rounds: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<Vec<ScriptTurn>>> {
    if registry.is_empty() {
        return Err(Error::NoRoles);
    }
    let follow = neutral_follow_ups(registry, threshold)?;
    Ok((0..per_role * registry.len())
        .map(|s| {
            let mut r = rng::stream(rng::derive(seed, s as u64), 13);
            (0..rounds)
                .flat_map(|_| {
                    let role = r.random_range(0..registry.len());
                    round(registry, role, &follow, &mut r)
                })
                .collect()
        })
        .collect())
}

/// `(transfer_score, stability_score)` for one transcript. A switch turn is
/// the first turn or one whose expected role differs from the previous one.
/// Transfer counts switch turns whose active role is the expected one;
/// stability counts other turns where the active role persisted and the reply
/// contains one of that role's style tokens. A score with no turns to count
/// is 1.
pub fn transfer_stability(transcript: &Transcript, style_tokens: &BTreeMap<String, Vec<String>>) -> Result<(f64, f64)> {
    let expected: Vec<&str> = transcript
        .expected
        .iter()
        .map(|e| e.as_deref().ok_or_else(|| Error::invalid("a turn has no expected role")))
        .collect::<Result<_>>()?;
    let (mut sw, mut sw_ok, mut st, mut st_ok) = (0usize, 0usize, 0usize, 0usize);
    for (i, rec) in transcript.records.iter().enumerate() {
        let active = rec.active_role_name.as_deref();
        if i == 0 || expected[i] != expected[i - 1] {
            sw += 1;
            sw_ok += usize::from(active == Some(expected[i]));
        } else {
            st += 1;
            let persisted = active.is_some() && active == transcript.records[i - 1].active_role_name.as_deref();
            let styled = active
                .and_then(|a| style_tokens.get(a))
                .is_some_and(|toks| transcript.reply(i).split_whitespace().any(|w| toks.iter().any(|t| t == w)));
            st_ok += usize::from(persisted && styled);
        }
    }
    let frac = |ok: usize, n: usize| if n == 0 { 1.0 } else { ok as f64 / n as f64 };
    Ok((frac(sw_ok, sw), frac(st_ok, st)))
}

/// Mean transfer and stability over a batch of scripts.
pub fn score_scripts(
    state: &AgentState,
    scripts: &[Vec<ScriptTurn>],
    style_tokens: &BTreeMap<String, Vec<String>>,
) -> Result<(f64, f64, Vec<Transcript>)> {
    if scripts.is_empty() {
        return Err(Error::invalid("no scripts"));
    }
    let mut transcripts = Vec::with_capacity(scripts.len());
    let (mut t, mut s) = (0.0, 0.0);
    for script in scripts {
        let tr = run_script(state, script, state.config.agent.max_tokens)?;
        let (a, b) = transfer_stability(&tr, style_tokens)?;
        t += a;
        s += b;
        transcripts.push(tr);
    }
    let n = scripts.len() as f64;
    Ok((t / n, s / n, transcripts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Grid,
    Gating,
    Transfer,
}

/// Paraphrases per role in the gating suite.
pub const PARAPHRASES_PER_ROLE: usize = 5;
/// Scripts in the transfer suite.
pub const TRANSFER_SCRIPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub proxy_notes: Vec<String>,
    pub config_digest: String,
    pub seed: u64,
    pub perplexity_grid: Option<PerplexityGrid>,
    pub gating_accuracy: Option<f64>,
    pub forgetting: Vec<ForgettingEntry>,
    pub transfer_score: Option<f64>,
    pub stability_score: Option<f64>,
}

/// Tokens found in exactly one role's training split, keyed by role name.
/// These are the style markers the stability score looks for.
pub fn style_tokens(corpora: &[RoleCorpus], vocab: &Vocabulary) -> BTreeMap<String, Vec<String>> {
    distinctive_tokens(corpora, vocab.len())
        .into_iter()
        .map(|(role, ids)| (role, ids.iter().filter_map(|&t| vocab.token(t)).map(ToString::to_string).collect()))
        .collect()
}

/// Runs `suite` against `state`, using `corpora` for the grid, the forgetting
/// comparison and the style markers.
pub fn evaluate(state: &AgentState, corpora: &[RoleCorpus], suite: Suite, config_digest: &str) -> Result<EvalReport> {
    let seed = state.config.seeds.master;
    let mut report = EvalReport {
        proxy_notes: PROXY_NOTES.iter().map(ToString::to_string).collect(),
        config_digest: config_digest.to_string(),
        seed,
        perplexity_grid: None,
        gating_accuracy: None,
        forgetting: Vec::new(),
        transfer_score: None,
        stability_score: None,
    };
    if matches!(suite, Suite::All | Suite::Grid) {
        report.perplexity_grid = Some(perplexity_grid(state, corpora)?);
        report.forgetting.push(shared_baseline_forgetting(state, corpora)?);
    }
    if matches!(suite, Suite::All | Suite::Gating) {
        let prompts = prompt_suite(&state.registry, PARAPHRASES_PER_ROLE, seed)?;
        report.gating_accuracy = Some(gating_accuracy(&state.registry, &state.gate, &prompts)?);
    }
    if matches!(suite, Suite::All | Suite::Transfer) {
        let ag = &state.config.agent;
        let scripts =
            alternating_scripts(&state.registry, TRANSFER_SCRIPTS, ag.script_turns / 2, ag.switch_threshold, seed)?;
        let style = style_tokens(corpora, state.model.vocab());
        let (t, s, _) = score_scripts(state, &scripts, &style)?;
        report.transfer_score = Some(t);
        report.stability_score = Some(s);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{Conversation, DialogueTurn, Speaker, TurnRecord};
    use crate::backbone::Vocabulary;
    use crate::gating::Embedder;
    use crate::numerics::{dot, Matrix};
    use crate::pipeline::tests::small;

    #[test]
    fn uniform_model_has_vocabulary_perplexity() {
        let vocab = Vocabulary::new((0..61).map(|i| format!("w{i}"))).unwrap();
        assert_eq!(vocab.len(), 64);
        let d = 4;
        let layers = vec![
            Matrix::uniform(64, d, 1.0, &mut rng::stream(1, 0)),
            Matrix::zeros(d, d),
            Matrix::zeros(d, 1),
            Matrix::zeros(64, d),
            Matrix::zeros(64, 1),
        ];
        let model = ModelState::from_parts(vocab, 4, layers).unwrap();
        let corpus = vec![TokenSequence(vec![3, 4, 5, 6]), TokenSequence(vec![10, 20])];
        let ppl = perplexity_with(&model, None, &corpus).unwrap();
        assert!((ppl - 64.0).abs() / 64.0 < 0.01);
        assert!(perplexity_with(&model, None, &[]).is_err());
    }

    #[test]
    fn perplexities_are_at_least_one_and_deterministic() {
        let p = small();
        let grid = perplexity_grid(&p.state, &p.corpora).unwrap();
        assert!(grid.cells.iter().flatten().chain(&grid.base).all(|&v| v >= 1.0));
        assert_eq!(grid, perplexity_grid(&p.state, &p.corpora).unwrap());
        assert_eq!(grid.blocks(), 3);
        assert_eq!(grid.diagonal().len(), 3);
    }

    #[test]
    fn diagonal_dominance_checks_every_row() {
        let mut g = PerplexityGrid {
            roles: vec!["a".into(), "b".into()],
            base: vec![10.0, 10.0],
            cells: vec![vec![2.0, 5.0], vec![6.0, 3.0]],
        };
        assert!(g.diagonal_dominant());
        g.cells[1][0] = 3.0;
        assert!(!g.diagonal_dominant());
        g.cells[1][0] = 6.0;
        g.base[0] = 2.0;
        assert!(!g.diagonal_dominant());
    }

    #[test]
    fn identical_grids_forget_nothing() {
        let p = small();
        let grid = perplexity_grid(&p.state, &p.corpora).unwrap();
        for e in forgetting_report(&grid, &grid).unwrap() {
            assert_eq!(e.relative, 0.0);
            assert_eq!(e.relative_loss, 0.0);
        }
        let mut other = grid.clone();
        other.roles[0] = "someone else".into();
        assert!(forgetting_report(&grid, &other).is_err());
    }

    #[test]
    fn forgetting_entry_relative_changes() {
        let e = ForgettingEntry::new("r", 10.0, 12.0);
        assert!((e.relative - 0.2).abs() < 1e-12);
        let expect = (libm::log(12.0) - libm::log(10.0)) / libm::log(10.0);
        assert!((e.relative_loss - expect).abs() < 1e-12);
    }

    fn profile_prompts(registry: &RoleRegistry) -> Vec<LabeledPrompt> {
        registry
            .roles()
            .iter()
            .map(|r| LabeledPrompt { text: r.profile.profile_text.clone(), role: r.profile.name.clone() })
            .collect()
    }

    #[test]
    fn gating_accuracy_counts_matching_activations() {
        let s = &small().state;
        let prompts = profile_prompts(&s.registry);
        assert_eq!(gating_accuracy(&s.registry, &s.gate, &prompts).unwrap(), 1.0);
        let mut wrong = prompts.clone();
        wrong[0].role = prompts[1].role.clone();
        assert!(gating_accuracy(&s.registry, &s.gate, &wrong).unwrap() < 1.0);
        let one = gating_accuracy(&s.registry, &s.gate, &wrong[..1]).unwrap();
        assert!(one == 0.0 || one == 1.0);
        assert!(gating_accuracy(&s.registry, &s.gate, &[]).is_err());
    }

    #[test]
    fn paraphrases_draw_mostly_on_their_own_profile() {
        let s = &small().state;
        let sets = profile_token_sets(&s.registry);
        for role in 0..s.registry.len() {
            for seed in 0..10 {
                let text = paraphrase(&s.registry, role, seed).unwrap();
                let toks: Vec<String> = embedding_tokens(&text).collect();
                let own = toks.iter().filter(|t| sets[role].contains(*t)).count();
                assert!(2 * own >= toks.len(), "{text}");
                for (j, other) in sets.iter().enumerate().filter(|(j, _)| *j != role) {
                    assert!(toks.iter().all(|t| !other.contains(t)), "{text} shares with role {j}");
                }
                assert_eq!(text, paraphrase(&s.registry, role, seed).unwrap());
            }
        }
    }

    #[test]
    fn routing_matches_a_brute_force_cosine_search() {
        let s = &small().state;
        let e = s.registry.embedder();
        for p in prompt_suite(&s.registry, 5, 3).unwrap() {
            let q = e.embed(&crate::gating::routing_text(&p.text));
            let mut best = 0;
            for i in 0..s.registry.len() {
                let row = e.embed(&s.registry.roles()[i].profile.profile_text);
                if dot(&row, &q) > dot(&e.embed(&s.registry.roles()[best].profile.profile_text), &q) {
                    best = i;
                }
            }
            assert_eq!(route(&s.registry, &s.gate, &p.text).unwrap().role, best);
        }
    }

    #[test]
    fn prompt_suite_has_canonical_and_paraphrases() {
        let s = &small().state;
        let suite = prompt_suite(&s.registry, 5, 1).unwrap();
        assert_eq!(suite.len(), 3 * 6);
        assert_eq!(suite[0].text, s.registry.roles()[0].profile.canonical_prompt);
    }

    fn record(active: Option<&str>) -> TurnRecord {
        TurnRecord {
            best_role: 0,
            best_cosine: 0.0,
            cosines: vec![0.0],
            switched: false,
            active_role: active.map(|_| 0),
            active_role_name: active.map(String::from),
            activation: Activation::None,
            gate_disagrees: false,
            untrained_block: false,
        }
    }

    fn transcript(turns: &[(&str, Option<&str>, &str)]) -> Transcript {
        let mut conversation = Conversation::default();
        let mut records = Vec::new();
        let mut expected = Vec::new();
        for (want, active, reply) in turns {
            conversation.turns.push(DialogueTurn {
                speaker: Speaker::User,
                text: "u".into(),
                implied_role: None,
                activation: None,
            });
            conversation.turns.push(DialogueTurn {
                speaker: Speaker::Agent,
                text: reply.to_string(),
                implied_role: active.map(String::from),
                activation: Some(Activation::None),
            });
            records.push(record(*active));
            expected.push(Some(want.to_string()));
        }
        Transcript { conversation, records, expected }
    }

    fn style() -> BTreeMap<String, Vec<String>> {
        [("a".to_string(), vec!["apple".to_string()]), ("b".to_string(), vec!["berry".to_string()])].into()
    }

    #[test]
    fn perfect_transcript_scores_one() {
        let t = transcript(&[
            ("a", Some("a"), "apple x"),
            ("a", Some("a"), "y apple"),
            ("b", Some("b"), "berry"),
            ("b", Some("b"), "berry"),
        ]);
        assert_eq!(transfer_stability(&t, &style()).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn style_and_persistence_both_count() {
        let t = transcript(&[
            ("a", Some("a"), "apple"),
            ("a", Some("a"), "berry"),
            ("b", Some("a"), "apple"),
            ("b", Some("b"), "berry"),
        ]);
        let (transfer, stability) = transfer_stability(&t, &style()).unwrap();
        assert_eq!(transfer, 0.5);
        assert_eq!(stability, 0.0);
    }

    #[test]
    fn scores_without_turns_are_vacuous() {
        let t = transcript(&[]);
        assert_eq!(transfer_stability(&t, &style()).unwrap(), (1.0, 1.0));
        let mut t = transcript(&[("a", Some("a"), "apple")]);
        t.expected[0] = None;
        assert!(transfer_stability(&t, &style()).is_err());
    }

    #[test]
    fn scripts_alternate_between_two_roles() {
        let s = &small().state;
        let scripts = alternating_scripts(&s.registry, 4, 5, 0.35, 9).unwrap();
        assert_eq!(scripts.len(), 4);
        for script in &scripts {
            assert_eq!(script.len(), 10);
            let roles: Vec<&str> = script.iter().step_by(2).map(|t| t.expected_role.as_deref().unwrap()).collect();
            assert_ne!(roles[0], roles[1]);
            assert!(roles.iter().enumerate().all(|(i, r)| *r == roles[i % 2]));
        }
        assert_eq!(scripts, alternating_scripts(&s.registry, 4, 5, 0.35, 9).unwrap());
        assert_eq!(random_role_suite(&s.registry, 10, 5, 0.35, 9).unwrap().len(), 30);
    }

    #[test]
    fn follow_ups_stay_under_the_threshold() {
        let s = &small().state;
        for f in neutral_follow_ups(&s.registry, 0.35).unwrap() {
            assert!(retrieval_cosines(&s.registry, f).iter().all(|&c| c <= 0.35));
        }
        assert!(neutral_follow_ups(&s.registry, -2.0).is_err());
        let one = RoleRegistry::new(Embedder::new(4, 1).unwrap());
        assert!(alternating_scripts(&one, 1, 1, 0.35, 0).is_err());
    }

    #[test]
    fn style_tokens_cover_the_exclusive_words() {
        let p = small();
        let style = style_tokens(&p.corpora, p.state.model.vocab());
        for c in &p.characters {
            for w in c.exclusive_words(p.state.model.vocab()) {
                assert!(style[&c.name].contains(&w), "{w} missing for {}", c.name);
            }
        }
    }

    #[test]
    fn evaluate_fills_the_requested_parts() {
        let p = small();
        let r = evaluate(&p.state, &p.corpora, Suite::Gating, "d").unwrap();
        assert!(r.gating_accuracy.is_some() && r.perplexity_grid.is_none() && r.transfer_score.is_none());
        let r = evaluate(&p.state, &p.corpora, Suite::All, "d").unwrap();
        assert!(r.perplexity_grid.is_some() && r.transfer_score.is_some());
        assert_eq!(r.forgetting.len(), 1);
        assert_eq!(r.proxy_notes.len(), PROXY_NOTES.len());
        assert_eq!(r, evaluate(&p.state, &p.corpora, Suite::All, "d").unwrap());
    }
}
