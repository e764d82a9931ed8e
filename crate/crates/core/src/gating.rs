//! Role registry and gating network.
//!
//! Routing runs in three stages: the instruction is embedded and matched
//! against the global role embedding matrix by cosine similarity; the
//! retrieved role embedding `e_k` is pushed through the gate,
//! `w_k = softmax(W_Gᵀ e_k)`; and the block at `argmax_j w_kj` is activated
//! (or the stored fusion weights, for roles added by fusion).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher13;

use crate::agent::parse_meta_prompt;
use crate::dynlora::{Activation, BlockId};
use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, l2_norm, softmax, Matrix, ProbVector};
use crate::rng;

/// Meta prompt used to request a character.
pub const META_PROMPT: &str = "I want you to act like {character}";

pub fn canonical_prompt(name: &str) -> String {
    META_PROMPT.replace("{character}", name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub name: String,
    pub profile_text: String,
    pub canonical_prompt: String,
}

impl RoleProfile {
    pub fn new(name: &str, profile_text: &str) -> Self {
        RoleProfile {
            name: name.to_string(),
            profile_text: profile_text.to_string(),
            canonical_prompt: canonical_prompt(name),
        }
    }
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn embedding_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
}

/// Seeded signed feature hashing into `dim` buckets, L2-normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Embedder {
    dim: usize,
    seed: u64,
}

impl Embedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        Ok(Embedder { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let mut h = SipHasher13::new_with_keys(self.seed, 0x726f_6c65_6c6f_7261);
        h.write(token.as_bytes());
        let v = h.finish();
        let sign = if v & 1 == 0 { 1.0 } else { -1.0 };
        (((v >> 1) % self.dim as u64) as usize, sign)
    }

    /// Unit vector; text with no tokens (or cancelling tokens) maps to `e_0`.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in embedding_tokens(text) {
            let (i, s) = self.bucket(&tok);
            v[i] += s;
        }
        let norm = l2_norm(&v);
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn embed_profile(profile_text: &str, d_embed: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(Embedder::new(d_embed, seed)?.embed(profile_text))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleRecord {
    pub profile: RoleProfile,
    pub activation: Activation,
}

/// Registered roles and the append-only global role embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleRegistry {
    embedder: Embedder,
    roles: Vec<RoleRecord>,
    embeddings: Matrix,
}

impl RoleRegistry {
    pub fn new(embedder: Embedder) -> Self {
        RoleRegistry { embedder, roles: Vec::new(), embeddings: Matrix::zeros(0, embedder.dim()) }
    }

    /// Rebuilds a registry, re-deriving every embedding row.
    pub fn from_records(embedder: Embedder, records: Vec<RoleRecord>, gate: &GateState) -> Result<Self> {
        let mut reg = RoleRegistry::new(embedder);
        for r in records {
            reg.register_role(gate, r.profile, r.activation)?;
        }
        Ok(reg)
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn roles(&self) -> &[RoleRecord] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// `E_global`, one row per role.
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.roles.iter().position(|r| r.profile.name == name)
    }

    /// Role whose activation is block `k`.
    pub fn role_for_block(&self, k: BlockId) -> Option<usize> {
        self.roles.iter().position(|r| r.activation == Activation::Block(k))
    }

    /// Appends a role and its profile embedding; returns the new role index.
    pub fn register_role(&mut self, gate: &GateState, profile: RoleProfile, activation: Activation) -> Result<usize> {
        if profile.name.trim().is_empty() {
            return Err(Error::invalid("role name must not be empty"));
        }
        if self.find(&profile.name).is_some() {
            return Err(Error::Conflict(format!("role {:?} already registered", profile.name)));
        }
        match &activation {
            Activation::None => return Err(Error::invalid("a role needs a block or fusion activation")),
            Activation::Block(k) => {
                if k.get() > gate.blocks() {
                    return Err(Error::invalid(format!("{k} does not exist in the gate")));
                }
                if self.role_for_block(*k).is_some() {
                    return Err(Error::Conflict(format!("{k} already belongs to another role")));
                }
            }
            Activation::Fusion(w) => {
                if w.len() != gate.blocks() {
                    return Err(Error::invalid("fusion weights must cover every existing block"));
                }
            }
        }
        let row = Matrix::new(1, self.embedder.dim(), self.embedder.embed(&profile.profile_text))?;
        self.embeddings.append_rows(&row)?;
        self.roles.push(RoleRecord { profile, activation });
        Ok(self.roles.len() - 1)
    }

    /// Gives every fusion role a zero weight for a newly appended block.
    pub(crate) fn extend_fusion_weights(&mut self) -> Result<()> {
        for role in &mut self.roles {
            if let Activation::Fusion(w) = &role.activation {
                let mut v = w.to_vec();
                v.push(0.0);
                role.activation = Activation::Fusion(ProbVector::new(v)?);
            }
        }
        Ok(())
    }
}

/// Gate matrix `W_G ∈ R^{d_embed × blocks}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    weights: Matrix,
}

impl GateState {
    pub fn zeros(d_embed: usize, blocks: usize) -> Self {
        GateState { weights: Matrix::zeros(d_embed, blocks) }
    }

    pub fn from_matrix(weights: Matrix) -> Result<Self> {
        if weights.rows() < 2 || weights.cols() == 0 {
            return Err(Error::invalid("gate needs at least 2 rows and 1 column"));
        }
        Ok(GateState { weights })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.weights
    }

    pub fn blocks(&self) -> usize {
        self.weights.cols()
    }

    pub fn d_embed(&self) -> usize {
        self.weights.rows()
    }

    /// `softmax(W_Gᵀ e)`.
    pub fn weights_for(&self, e: &[f64]) -> Result<ProbVector> {
        if e.len() != self.weights.rows() {
            return Err(Error::invalid("embedding length does not match the gate"));
        }
        softmax(&self.weights.matvec_t(e))
    }

    /// Appends a zero column for a new block.
    pub(crate) fn append_block(&mut self) -> Result<()> {
        self.weights.append_cols(&Matrix::zeros(self.weights.rows(), 1))
    }

    /// SHA-256 of each column's bytes.
    pub fn column_digests(&self) -> Vec<String> {
        (0..self.blocks()).map(|j| self.weights.col_slice(j, j + 1).digest()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Token-dropout copies of each profile added to the training pairs.
    pub perturbations: usize,
    pub drop_probability: f64,
    pub max_attempts: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { learning_rate: 0.5, epochs: 60, seed: 3, perturbations: 5, drop_probability: 0.2, max_attempts: 5 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.epochs == 0 || self.max_attempts == 0 {
            return Err(Error::invalid("gate learning rate, epochs and attempts must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return Err(Error::invalid("drop probability must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatePair {
    pub embedding: Vec<f64>,
    pub target: BlockId,
}

/// Profile embedding plus token-dropout copies for every block-backed role.
pub fn gate_training_pairs(registry: &RoleRegistry, config: &GateConfig) -> Vec<GatePair> {
    let mut pairs = Vec::new();
    for (i, role) in registry.roles.iter().enumerate() {
        let Activation::Block(k) = role.activation else { continue };
        pairs.push(GatePair { embedding: registry.embeddings.row(i).to_vec(), target: k });
        let tokens: Vec<String> = embedding_tokens(&role.profile.profile_text).collect();
        let mut r = rng::stream(rng::derive(config.seed, i as u64), 7);
        for _ in 0..config.perturbations {
            let kept: Vec<&str> =
                tokens.iter().filter(|_| !r.random_bool(config.drop_probability)).map(String::as_str).collect();
            pairs.push(GatePair { embedding: registry.embedder.embed(&kept.join(" ")), target: k });
        }
    }
    pairs
}

/// Trains gate columns `first_trainable..` by SGD on cross-entropy of
/// `softmax(W_Gᵀ e)` against each pair's block. Columns before
/// `first_trainable` keep their values. Trainable columns are re-initialised
/// from a fresh seed on each of up to `max_attempts` tries; the first run that
/// classifies every pair correctly is returned.
pub fn train_gate(
    gate: &GateState,
    pairs: &[GatePair],
    config: &GateConfig,
    first_trainable: usize,
) -> Result<GateState> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no gate training pairs"));
    }
    let blocks = gate.blocks();
    if first_trainable >= blocks {
        return Err(Error::invalid("no trainable gate columns"));
    }
    for p in pairs {
        if p.target.get() > blocks {
            return Err(Error::invalid(format!("target {} exceeds the gate's {blocks} blocks", p.target)));
        }
        if p.embedding.len() != gate.d_embed() {
            return Err(Error::invalid("pair embedding length does not match the gate"));
        }
    }
    for (i, a) in pairs.iter().enumerate() {
        if let Some(b) = pairs[i + 1..].iter().find(|b| b.embedding == a.embedding && b.target != a.target) {
            return Err(Error::TrainingFailure(format!("identical embeddings labelled {} and {}", a.target, b.target)));
        }
    }

    let d = gate.d_embed();
    for attempt in 0..config.max_attempts {
        let seed = rng::derive(config.seed, attempt as u64);
        let mut r = rng::stream(seed, 0);
        let mut w = gate.weights.clone();
        let fresh = Matrix::gaussian(d, blocks - first_trainable, 0.01, &mut r);
        w.set_col_slice(first_trainable, &fresh);

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut r);
            for &i in &order {
                let p = &pairs[i];
                let mut g = softmax(&w.matvec_t(&p.embedding))?.into_inner();
                g[p.target.index()] -= 1.0;
                for (j, gj) in g.iter_mut().enumerate() {
                    if j < first_trainable {
                        *gj = 0.0;
                    }
                }
                w.add_outer(-config.learning_rate, &p.embedding, &g);
            }
        }
        let trained = GateState { weights: w };
        if pairs.iter().all(|p| argmax(&trained.weights.matvec_t(&p.embedding)) == p.target.index()) {
            return Ok(trained);
        }
        log::debug!("gate attempt {attempt} did not separate all pairs");
    }
    Err(Error::TrainingFailure(format!(
        "gate failed to separate its training pairs after {} attempts",
        config.max_attempts
    )))
}

/// Gradient of the gate cross-entropy for one pair, `e ⊗ (softmax(W_Gᵀe) − onehot)`.
pub fn gate_loss_grad(gate: &GateState, pair: &GatePair) -> Result<(f64, Matrix)> {
    let p = gate.weights_for(&pair.embedding)?;
    let loss = crate::numerics::cross_entropy(&p, pair.target.index())?;
    let mut g = p.into_inner();
    g[pair.target.index()] -= 1.0;
    let mut grad = Matrix::zeros(gate.d_embed(), gate.blocks());
    grad.add_outer(1.0, &pair.embedding, &g);
    Ok((loss, grad))
}

/// Outcome of routing one instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub role: usize,
    /// Stage-1 cosine of the instruction with every role row.
    pub cosines: Vec<f64>,
    pub embedding: Vec<f64>,
    pub gate_weights: ProbVector,
    pub activation: Activation,
    /// The gate's argmax differed from the role's own block; the role's block
    /// was used.
    pub gate_disagrees: bool,
}

impl Route {
    pub fn confidence(&self) -> f64 {
        self.cosines[self.role]
    }
}

/// Text actually embedded for routing: the character name when the meta
/// prompt template is recognised, otherwise the whole instruction.
pub fn routing_text(instruction: &str) -> String {
    let parsed = parse_meta_prompt(instruction);
    parsed.character.unwrap_or(parsed.instruction)
}

/// Stage-1 cosines of `instruction` against every role row.
pub fn retrieval_cosines(registry: &RoleRegistry, instruction: &str) -> Vec<f64> {
    let q = registry.embedder.embed(&routing_text(instruction));
    (0..registry.len()).map(|i| dot(registry.embeddings.row(i), &q)).collect()
}

pub fn route(registry: &RoleRegistry, gate: &GateState, instruction: &str) -> Result<Route> {
    if registry.is_empty() {
        return Err(Error::NoRoles);
    }
    let cosines = retrieval_cosines(registry, instruction);
    route_role(registry, gate, argmax(&cosines), cosines)
}

/// Stages 2 and 3 for an already selected role.
pub fn route_role(registry: &RoleRegistry, gate: &GateState, role: usize, cosines: Vec<f64>) -> Result<Route> {
    let record = registry.roles.get(role).ok_or(Error::NoRoles)?;
    let embedding = registry.embeddings.row(role).to_vec();
    let gate_weights = gate.weights_for(&embedding)?;
    let (activation, gate_disagrees) = match &record.activation {
        Activation::Block(k) => {
            let pick = BlockId::from_index(gate_weights.argmax());
            if pick != *k {
                log::warn!("gate selected {pick} for role {:?} but its block is {k}; using {k}", record.profile.name);
            }
            (Activation::Block(*k), pick != *k)
        }
        other => (other.clone(), false),
    };
    Ok(Route { role, cosines, embedding, gate_weights, activation, gate_disagrees })
}
