//! Synthetic characters and their corpora.
//!
//! The shared vocabulary has 32 common words followed by blocks of 4 words
//! that each belong to exactly one character. A character's unigram
//! distribution puts half its mass on its own exclusive words and half on the
//! common pool, and its sequences are sprinkled with signature phrases, so its
//! style is measurable by counting tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::backbone::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::gating::RoleProfile;
use crate::numerics::ProbVector;
use crate::rng;

pub const USER_TAG: &str = "<user>";
pub const AGENT_TAG: &str = "<agent>";

pub const COMMON_WORDS: [&str; 32] = [
    "the", "a", "of", "and", "to", "in", "we", "it", "sea", "sky", "road", "fire", "stone", "light", "night", "day",
    "home", "hand", "word", "time", "old", "new", "far", "near", "here", "there", "now", "then", "good", "dark",
    "long", "small",
];

pub const EXCLUSIVE_PER_CHARACTER: usize = 4;

/// Four exclusive words per character; the ninth block is reserved for the
/// character added after pre-tuning.
pub const EXCLUSIVE_WORDS: [&str; 36] = [
    "zorbin", "quill", "mizzle", "brack", //
    "tansy", "glimmer", "oxley", "fennick", //
    "drosk", "vellum", "pike", "harrow", //
    "lumen", "sorrel", "cadence", "nimbus", //
    "grist", "tallow", "ember", "wicker", //
    "pallas", "rune", "thistle", "marrow", //
    "cobble", "sprocket", "flint", "gizmo", //
    "saffron", "velvet", "orchid", "plume", //
    "quasar", "nebula", "zenith", "vortex",
];

const FIRST_NAMES: [&str; 12] = [
    "aldric", "brenna", "corvin", "delphine", "ezren", "fenna", "garrick", "hesper", "isolde", "jorund", "kestrel",
    "liora",
];
const LAST_NAMES: [&str; 12] =
    ["voss", "quillon", "hale", "marsh", "tollan", "drake", "moorcroft", "lune", "wren", "ashby", "pell", "sarn"];
const TRAITS: [&str; 12] = [
    "wanderer",
    "scholar",
    "smuggler",
    "astronomer",
    "blacksmith",
    "poet",
    "tinkerer",
    "herbalist",
    "stargazer",
    "ferryman",
    "falconer",
    "cartographer",
];

/// Probability of starting a signature phrase at any position.
pub const PHRASE_RATE: f64 = 0.2;

/// Vocabulary used by the synthetic pipeline: specials, speaker tags, common
/// words, then the exclusive blocks.
pub fn standard_vocabulary() -> Vocabulary {
    let words = [USER_TAG, AGENT_TAG].into_iter().chain(COMMON_WORDS).chain(EXCLUSIVE_WORDS);
    Vocabulary::new(words).expect("static word lists are distinct")
}

fn content_tokens(vocab: &Vocabulary) -> Vec<usize> {
    (0..vocab.len())
        .filter(|&i| {
            let t = vocab.token(i).unwrap_or("<");
            !t.starts_with('<')
        })
        .collect()
}

fn display_name(index: usize) -> String {
    let i = (index - 1) % FIRST_NAMES.len();
    let j = ((index - 1) / FIRST_NAMES.len() + i) % LAST_NAMES.len();
    let cap = |s: &str| {
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_uppercase().chain(c).collect::<String>(),
            None => String::new(),
        }
    };
    format!("{} {}", cap(FIRST_NAMES[i]), cap(LAST_NAMES[j]))
}

/// A synthetic persona.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub index: usize,
    pub name: String,
    pub seed: u64,
    pub exclusive_tokens: Vec<usize>,
    pub signature_phrases: Vec<Vec<usize>>,
    pub unigram_bias: ProbVector,
    pub profile_text: String,
}

impl CharacterSpec {
    pub fn profile(&self) -> RoleProfile {
        RoleProfile::new(&self.name, &self.profile_text)
    }

    pub fn exclusive_words(&self, vocab: &Vocabulary) -> Vec<String> {
        self.exclusive_tokens.iter().filter_map(|&t| vocab.token(t)).map(ToString::to_string).collect()
    }
}

/// Deterministic character `index` (1-based) for `master_seed`.
pub fn make_character(index: usize, master_seed: u64, vocab: &Vocabulary) -> Result<CharacterSpec> {
    if index == 0 {
        return Err(Error::invalid("character indices start at 1"));
    }
    let content = content_tokens(vocab);
    let required = COMMON_WORDS.len() + EXCLUSIVE_PER_CHARACTER * index;
    if content.len() < required {
        return Err(Error::invalid(format!(
            "vocabulary has {} content tokens; character {index} needs at least {required}",
            content.len()
        )));
    }
    let common = &content[..COMMON_WORDS.len()];
    let start = COMMON_WORDS.len() + EXCLUSIVE_PER_CHARACTER * (index - 1);
    let exclusive: Vec<usize> = content[start..start + EXCLUSIVE_PER_CHARACTER].to_vec();

    let seed = rng::derive(master_seed, index as u64);
    let mut r = rng::stream(seed, 0);

    let mut bias = vec![0.0; vocab.len()];
    let ex_w: Vec<f64> = exclusive.iter().map(|_| 0.5 + r.random::<f64>()).collect();
    let ex_sum: f64 = ex_w.iter().sum();
    for (&t, w) in exclusive.iter().zip(&ex_w) {
        bias[t] = 0.5 * w / ex_sum;
    }
    let co_w: Vec<f64> = common.iter().map(|_| 0.2 + r.random::<f64>()).collect();
    let co_sum: f64 = co_w.iter().sum();
    for (&t, w) in common.iter().zip(&co_w) {
        bias[t] = 0.5 * w / co_sum;
    }
    let total: f64 = bias.iter().sum();
    bias.iter_mut().for_each(|b| *b /= total);
    let unigram_bias = ProbVector::new(bias)?;

    let mut phrases: Vec<Vec<usize>> = Vec::new();
    while phrases.len() < 3 {
        let len = r.random_range(2..=4);
        let mut phrase = vec![*exclusive.choose(&mut r).expect("non-empty")];
        while phrase.len() < len {
            let pool = if r.random_bool(0.5) { &exclusive[..] } else { common };
            phrase.push(*pool.choose(&mut r).expect("non-empty"));
        }
        if !phrases.contains(&phrase) {
            phrases.push(phrase);
        }
    }

    let name = display_name(index);
    let words = |p: &[usize]| p.iter().map(|&t| vocab.token(t).unwrap_or("")).collect::<Vec<_>>().join(" ");
    let trait_word = TRAITS[(index - 1) % TRAITS.len()];
    let profile_text = format!(
        "{name} is a {trait_word}. {name} often says \"{}\", \"{}\" and \"{}\".",
        words(&phrases[0]),
        words(&phrases[1]),
        words(&phrases[2])
    );

    Ok(CharacterSpec {
        index,
        name,
        seed,
        exclusive_tokens: exclusive,
        signature_phrases: phrases,
        unigram_bias,
        profile_text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// One role's sequences, partitioned into train and held-out splits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoleCorpus {
    pub role: String,
    pub train: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
}

impl RoleCorpus {
    /// Last tenth (rounded down, at least one) of `sequences` becomes held-out.
    pub fn split(role: impl Into<String>, mut sequences: Vec<TokenSequence>) -> Result<Self> {
        if sequences.len() < 10 {
            return Err(Error::invalid(format!(
                "{} sequences leave no held-out split; need at least 10",
                sequences.len()
            )));
        }
        let held = sequences.len() / 10;
        let heldout = sequences.split_off(sequences.len() - held);
        Ok(RoleCorpus { role: role.into(), train: sequences, heldout })
    }

    pub fn split_of(&self, split: Split) -> &[TokenSequence] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }
}

/// `n_sequences` sequences of `length` tokens, 90/10 train/held-out.
pub fn sample_corpus(spec: &CharacterSpec, n_sequences: usize, length: usize, seed: u64) -> Result<RoleCorpus> {
    if n_sequences < 10 {
        return Err(Error::invalid("need at least 10 sequences so the held-out split is non-empty"));
    }
    if length == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let dist = WeightedIndex::new(spec.unigram_bias.iter().copied())
        .map_err(|e| Error::invalid(format!("bad unigram bias: {e}")))?;
    let mut r = rng::stream(rng::derive(seed, spec.seed), 1);
    let sequences = (0..n_sequences)
        .map(|_| {
            let mut seq = Vec::with_capacity(length);
            while seq.len() < length {
                if r.random_bool(PHRASE_RATE) {
                    let phrase = spec.signature_phrases.choose(&mut r).expect("phrases exist");
                    seq.extend(phrase.iter().take(length - seq.len()));
                } else {
                    seq.push(dist.sample(&mut r));
                }
            }
            TokenSequence(seq)
        })
        .collect();
    RoleCorpus::split(spec.name.clone(), sequences)
}

/// Token counts over a set of sequences.
pub fn unigram_counts(seqs: &[TokenSequence], vocab_len: usize) -> Vec<usize> {
    let mut counts = vec![0; vocab_len];
    for t in seqs.iter().flat_map(|s| s.ids()) {
        if let Some(c) = counts.get_mut(*t) {
            *c += 1;
        }
    }
    counts
}

/// Tokens that occur in exactly one role's training split, per role.
pub fn distinctive_tokens(corpora: &[RoleCorpus], vocab_len: usize) -> BTreeMap<String, Vec<usize>> {
    let counts: Vec<Vec<usize>> = corpora.iter().map(|c| unigram_counts(&c.train, vocab_len)).collect();
    corpora
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let own: Vec<usize> = (0..vocab_len)
                .filter(|&t| counts[i][t] > 0 && counts.iter().enumerate().all(|(j, cj)| j == i || cj[t] == 0))
                .collect();
            (c.role.clone(), own)
        })
        .collect()
}

/// One line of the corpus dump format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub role: String,
    pub tokens: Vec<String>,
    pub split: Split,
}

pub fn to_records(corpus: &RoleCorpus, vocab: &Vocabulary) -> Vec<CorpusRecord> {
    [Split::Train, Split::Heldout]
        .into_iter()
        .flat_map(|split| {
            corpus.split_of(split).iter().map(move |s| CorpusRecord {
                role: corpus.role.clone(),
                tokens: s.ids().iter().map(|&t| vocab.token(t).unwrap_or("<unk>").to_string()).collect(),
                split,
            })
        })
        .collect()
}

/// Groups dump records back into corpora, preserving first-seen role order.
pub fn from_records(records: &[CorpusRecord], vocab: &Vocabulary) -> Result<Vec<RoleCorpus>> {
    let mut out: Vec<RoleCorpus> = Vec::new();
    for rec in records {
        if rec.tokens.is_empty() {
            return Err(Error::invalid(format!("empty sequence for role {}", rec.role)));
        }
        let seq = TokenSequence(
            rec.tokens.iter().map(|t| vocab.id(&t.to_lowercase()).unwrap_or(crate::backbone::UNK)).collect(),
        );
        let pos = match out.iter().position(|c| c.role == rec.role) {
            Some(p) => p,
            None => {
                out.push(RoleCorpus { role: rec.role.clone(), ..Default::default() });
                out.len() - 1
            }
        };
        match rec.split {
            Split::Train => out[pos].train.push(seq),
            Split::Heldout => out[pos].heldout.push(seq),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kl(p: &[usize], q: &[usize]) -> f64 {
        let smooth = 0.5;
        let n = p.len() as f64;
        let sp: f64 = p.iter().sum::<usize>() as f64 + smooth * n;
        let sq: f64 = q.iter().sum::<usize>() as f64 + smooth * n;
        p.iter()
            .zip(q)
            .map(|(&a, &b)| {
                let pa = (a as f64 + smooth) / sp;
                let qb = (b as f64 + smooth) / sq;
                pa * libm::log(pa / qb)
            })
            .sum()
    }

    fn suite() -> (Vocabulary, Vec<CharacterSpec>, Vec<RoleCorpus>) {
        let vocab = standard_vocabulary();
        let specs: Vec<CharacterSpec> = (1..=9).map(|i| make_character(i, 2024, &vocab).unwrap()).collect();
        let corpora = specs.iter().map(|s| sample_corpus(s, 200, 12, 7).unwrap()).collect();
        (vocab, specs, corpora)
    }

    #[test]
    fn characters_are_deterministic_and_disjoint() {
        let (vocab, specs, _) = suite();
        assert_eq!(make_character(3, 2024, &vocab).unwrap(), specs[2]);
        for (i, a) in specs.iter().enumerate() {
            assert!(a.signature_phrases.len() >= 2 && a.signature_phrases.len() <= 4);
            for p in &a.signature_phrases {
                assert!((2..=4).contains(&p.len()));
            }
            for b in &specs[i + 1..] {
                assert!(a.signature_phrases.iter().all(|p| !b.signature_phrases.contains(p)));
                assert!(a.exclusive_tokens.iter().all(|t| !b.exclusive_tokens.contains(t)));
                assert_ne!(a.name, b.name);
            }
            assert!(a.profile_text.contains(&a.name));
        }
        assert_eq!(specs.len(), 9);
    }

    #[test]
    fn vocabulary_too_small_names_required_size() {
        let vocab = Vocabulary::new(COMMON_WORDS).unwrap();
        let err = make_character(1, 0, &vocab).unwrap_err();
        assert!(matches!(&err, Error::InvalidArgument(m) if m.contains("36")), "{err}");
        assert!(make_character(10, 0, &standard_vocabulary()).is_err());
    }

    #[test]
    fn corpus_splits_and_determinism() {
        let (vocab, specs, corpora) = suite();
        let c = &corpora[0];
        assert_eq!(c.train.len(), 180);
        assert_eq!(c.heldout.len(), 20);
        assert!(c.train.iter().chain(&c.heldout).all(|s| s.len() == 12));
        assert_eq!(&sample_corpus(&specs[0], 200, 12, 7).unwrap(), c);
        assert_ne!(corpora[0].train[0], corpora[1].train[0]);
        assert!(sample_corpus(&specs[0], 9, 12, 7).is_err());
        let back = from_records(&to_records(c, &vocab), &vocab).unwrap();
        assert_eq!(back, vec![c.clone()]);
    }

    #[test]
    fn exclusive_tokens_dominate_own_corpus() {
        let (vocab, specs, corpora) = suite();
        for (i, s) in specs.iter().enumerate() {
            let count = |c: &RoleCorpus| {
                let counts = unigram_counts(&c.train, vocab.len());
                s.exclusive_tokens.iter().map(|&t| counts[t]).sum::<usize>() as f64
            };
            let own = count(&corpora[i]) / (corpora[i].train.len() * 12) as f64;
            for (j, other) in corpora.iter().enumerate().filter(|(j, _)| *j != i) {
                let theirs = (count(other) + 1.0) / (corpora[j].train.len() * 12) as f64;
                assert!(own / theirs > 10.0, "character {} vs {}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn characters_are_statistically_separable() {
        let (vocab, _, corpora) = suite();
        let counts: Vec<(Vec<usize>, Vec<usize>)> = corpora
            .iter()
            .map(|c| (unigram_counts(&c.train, vocab.len()), unigram_counts(&c.heldout, vocab.len())))
            .collect();
        for (i, (train_i, held_i)) in counts.iter().enumerate() {
            let within = kl(train_i, held_i);
            for (j, (train_j, _)) in counts.iter().enumerate().filter(|(j, _)| *j != i) {
                let across = kl(train_i, train_j);
                assert!(across > within, "{i} vs {j}: {across} <= {within}");
            }
        }
    }

    #[test]
    fn distinctive_tokens_recover_exclusive_sets() {
        let (_, specs, corpora) = suite();
        let vocab = standard_vocabulary();
        let found = distinctive_tokens(&corpora, vocab.len());
        for s in &specs {
            assert_eq!(found[&s.name], s.exclusive_tokens);
        }
    }
}
