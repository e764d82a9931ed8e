//! Run configuration. Every section has defaults, so a config file only needs
//! the fields it overrides. The total adapter rank is never configured
//! directly; it is always `roles × partial_rank`.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::dynlora::{BlockLayout, DEFAULT_BASELINE_RANK, DEFAULT_EPOCHS};
use crate::error::{Error, Result};
use crate::gating::{Embedder, GateConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Drives character generation.
    pub master: u64,
    pub corpus: u64,
    pub lora: u64,
    pub embed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { master: 2024, corpus: 7, lora: 11, embed: 51 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTraining {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Rank of the single-block comparator used for forgetting measurements.
    pub baseline_rank: usize,
}

impl Default for AdapterTraining {
    fn default() -> Self {
        AdapterTraining { learning_rate: 1e-4, epochs: DEFAULT_EPOCHS, baseline_rank: DEFAULT_BASELINE_RANK }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub sequences_per_role: usize,
    pub sequence_length: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { sequences_per_role: 200, sequence_length: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Minimum stage-1 cosine for a user turn to switch roles.
    pub switch_threshold: f64,
    pub max_tokens: usize,
    /// User turns per generated stability script.
    pub script_turns: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { switch_threshold: 0.35, max_tokens: 8, script_turns: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seeds: Seeds,
    pub backbone: BackboneConfig,
    pub layout: BlockLayout,
    pub adapter: AdapterTraining,
    pub d_embed: usize,
    pub gate: GateConfig,
    pub corpus: CorpusConfig,
    pub agent: AgentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seeds: Seeds::default(),
            backbone: BackboneConfig::default(),
            layout: BlockLayout::new(8, 4, 4.0).expect("static layout"),
            adapter: AdapterTraining::default(),
            d_embed: 16,
            gate: GateConfig::default(),
            corpus: CorpusConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl Config {
    /// Desk-scale reference run: the defaults with a plain-SGD adapter step
    /// size large enough to train blocks in ten epochs.
    pub fn reference() -> Self {
        let mut c = Config::default();
        c.adapter.learning_rate = REFERENCE_ADAPTER_LR;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gate.validate()?;
        Embedder::new(self.d_embed, self.seeds.embed)?;
        let a = &self.adapter;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) || a.epochs == 0 || a.baseline_rank == 0 {
            return Err(Error::invalid("adapter learning rate, epochs and baseline rank must be positive"));
        }
        if self.corpus.sequences_per_role < 10 || self.corpus.sequence_length == 0 {
            return Err(Error::invalid("corpus needs at least 10 sequences of length at least 1 per role"));
        }
        let ag = &self.agent;
        if ag.max_tokens == 0 || ag.script_turns == 0 || !ag.switch_threshold.is_finite() {
            return Err(Error::invalid("agent counts must be positive and the threshold finite"));
        }
        Ok(())
    }

    pub fn embedder(&self) -> Embedder {
        Embedder::new(self.d_embed, self.seeds.embed).expect("validated")
    }
}

pub const REFERENCE_ADAPTER_LR: f64 = 0.2;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = Config::default();
        assert_eq!(c.layout.partial_rank(), 4);
        assert_eq!(c.layout.total_rank(), 32);
        assert_eq!(c.adapter.learning_rate, 1e-4);
        assert_eq!(c.adapter.epochs, 10);
        assert_eq!(c.adapter.baseline_rank, 8);
        assert!(c.validate().is_ok());
        assert!(Config::reference().validate().is_ok());
    }

    #[test]
    fn invalid_counts_are_rejected() {
        let mut c = Config::default();
        c.corpus.sequences_per_role = 5;
        assert!(c.validate().is_err());
        let c = Config { d_embed: 1, ..Config::default() };
        assert!(c.validate().is_err());
    }
}
