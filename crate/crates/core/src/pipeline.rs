//! End-to-end construction of a served agent from a [`Config`]: synthetic
//! characters and corpora, base pretraining, one adapter block per role and
//! the gate.

use alloc::vec::Vec;

use crate::agent::AgentState;
use crate::backbone::{pretrain_base, TokenSequence};
use crate::config::Config;
use crate::corpus::{make_character, sample_corpus, standard_vocabulary, CharacterSpec, RoleCorpus};
use crate::dynlora::{train_block, Activation, BlockId, LoraMode, LoraModule};
use crate::error::Result;
use crate::gating::{gate_training_pairs, train_gate, GateState, RoleRegistry};

/// A freshly built agent together with the data it was built from.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub state: AgentState,
    pub characters: Vec<CharacterSpec>,
    pub corpora: Vec<RoleCorpus>,
}

/// Character `index` (1-based) and its corpus under `config`. Indices past
/// `config.layout.roles()` give the roles held back for incremental learning.
pub fn synthetic_role(config: &Config, index: usize) -> Result<(CharacterSpec, RoleCorpus)> {
    let vocab = standard_vocabulary();
    let spec = make_character(index, config.seeds.master, &vocab)?;
    let corpus =
        sample_corpus(&spec, config.corpus.sequences_per_role, config.corpus.sequence_length, config.seeds.corpus)?;
    Ok((spec, corpus))
}

/// Builds the whole agent. Deterministic for a given config.
pub fn pretune(config: &Config) -> Result<Pretrained> {
    config.validate()?;
    let roles = config.layout.roles();
    let mut characters = Vec::with_capacity(roles);
    let mut corpora = Vec::with_capacity(roles);
    for i in 1..=roles {
        let (spec, corpus) = synthetic_role(config, i)?;
        characters.push(spec);
        corpora.push(corpus);
    }
    log::info!("pretraining base on {} roles", roles);
    let mixed: Vec<TokenSequence> = corpora.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let model = pretrain_base(&mixed, standard_vocabulary(), &config.backbone)?;

    let mut lora = LoraModule::new(config.layout, LoraMode::Partitioned, &model, config.seeds.lora)?;
    for (i, corpus) in corpora.iter().enumerate() {
        let k = BlockId::from_index(i);
        log::info!("training block {} on {}", k.get(), corpus.role);
        train_block(
            &mut lora,
            &model,
            k,
            &corpus.train,
            config.adapter.learning_rate,
            config.adapter.epochs,
            config.seeds.lora,
        )?;
    }

    let mut registry = RoleRegistry::new(config.embedder());
    let blank = GateState::zeros(config.d_embed, roles);
    for (i, spec) in characters.iter().enumerate() {
        registry.register_role(&blank, spec.profile(), Activation::Block(BlockId::from_index(i)))?;
    }
    let pairs = gate_training_pairs(&registry, &config.gate);
    let gate = train_gate(&blank, &pairs, &config.gate, 0)?;

    Ok(Pretrained { state: AgentState { model, lora, registry, gate, config: config.clone() }, characters, corpora })
}
