//! Adding roles after pre-tuning without touching what earlier roles use.
//!
//! Fusion is data-free: the new role is served by a gate-weighted mix of the
//! existing blocks. Expansion appends a fresh block, trains it alone on the
//! new role's corpus and grows the gate by one column.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agent::AgentState;
use crate::backbone::TokenSequence;
use crate::dynlora::{train_block, Activation, BlockId};
use crate::error::{Error, Result};
use crate::gating::{gate_training_pairs, train_gate, RoleProfile};
use crate::numerics::ProbVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fusion,
    Expansion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalReport {
    pub strategy: Strategy,
    pub new_role_index: usize,
    pub fusion_weights: Option<ProbVector>,
    /// Every pre-existing block (and, for expansion, every old gate column)
    /// hashed identically before and after.
    pub blocks_frozen_verified: bool,
    /// Gate columns before and after.
    pub gate_growth: (usize, usize),
    /// Old gate columns had to be retrained to keep every role routable.
    pub gate_retrained: bool,
}

fn block_digests(state: &AgentState) -> Result<Vec<String>> {
    state.lora.layout().blocks().map(|k| state.lora.block_digest(k)).collect()
}

/// Registers `profile` as a fusion role with weights `softmax(W_Gᵀ e)` over
/// the existing blocks. No weight matrix changes.
pub fn fuse_role(state: &mut AgentState, profile: RoleProfile) -> Result<IncrementalReport> {
    if state.lora.trained_blocks().is_empty() {
        return Err(Error::Unsupported("fusion needs at least one trained block".into()));
    }
    let before = block_digests(state)?;
    let e = state.registry.embedder().embed(&profile.profile_text);
    let w = state.gate.weights_for(&e)?;
    let index = state.registry.register_role(&state.gate, profile, Activation::Fusion(w.clone()))?;
    let cols = state.gate.blocks();
    Ok(IncrementalReport {
        strategy: Strategy::Fusion,
        new_role_index: index,
        fusion_weights: Some(w),
        blocks_frozen_verified: before == block_digests(state)?,
        gate_growth: (cols, cols),
        gate_retrained: false,
    })
}

/// Appends a block for `profile`, trains it on `corpus` and grows the gate.
/// The new gate column is trained with the old ones frozen; if that cannot
/// route every role, all columns are retrained from their previous values.
/// On error `state` is left unchanged.
pub fn expand_role(
    state: &mut AgentState,
    profile: RoleProfile,
    corpus: &[TokenSequence],
    lr: f64,
    epochs: usize,
) -> Result<IncrementalReport> {
    if corpus.iter().all(TokenSequence::is_empty) {
        return Err(Error::invalid("expansion needs a non-empty corpus"));
    }
    if state.registry.find(&profile.name).is_some() {
        return Err(Error::Conflict(alloc::format!("role {:?} already registered", profile.name)));
    }
    let before = block_digests(state)?;
    let old_cols = state.gate.blocks();
    let old_gate = state.gate.column_digests();

    let mut lora = state.lora.clone();
    let k: BlockId = lora.grow()?;
    train_block(&mut lora, &state.model, k, corpus, lr, epochs, state.config.seeds.lora)?;

    let mut gate = state.gate.clone();
    gate.append_block()?;
    let mut registry = state.registry.clone();
    registry.extend_fusion_weights()?;
    let index = registry.register_role(&gate, profile, Activation::Block(k))?;
    let pairs = gate_training_pairs(&registry, &state.config.gate);
    let (gate, gate_retrained) = match train_gate(&gate, &pairs, &state.config.gate, old_cols) {
        Ok(g) => (g, false),
        Err(Error::TrainingFailure(msg)) => {
            log::warn!("new gate column alone could not route every role ({msg}); retraining all columns");
            (train_gate(&gate, &pairs, &state.config.gate, 0)?, true)
        }
        Err(e) => return Err(e),
    };

    let mut verified =
        before.iter().enumerate().all(|(i, d)| lora.block_digest(BlockId::from_index(i)).is_ok_and(|now| &now == d));
    if !gate_retrained {
        verified &= gate.column_digests()[..old_cols] == old_gate[..];
    }
    state.lora = lora;
    state.gate = gate;
    state.registry = registry;
    state.config.layout = *state.lora.layout();
    Ok(IncrementalReport {
        strategy: Strategy::Expansion,
        new_role_index: index,
        fusion_weights: None,
        blocks_frozen_verified: verified,
        gate_growth: (old_cols, old_cols + 1),
        gate_retrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynlora::{lora_forward, AdaptedLayer, AdapterView, LoraMode, LoraModule};
    use crate::evalkit::perplexity;
    use crate::pipeline::synthetic_role;
    use crate::pipeline::tests::{small, small_config};

    fn fourth_role() -> (RoleProfile, crate::corpus::RoleCorpus) {
        let (spec, corpus) = synthetic_role(&small_config(), 4).unwrap();
        (spec.profile(), corpus)
    }

    #[test]
    fn fusion_is_weight_read_only() {
        let mut s = small().state.clone();
        let (profile, _) = fourth_role();
        let model = s.model.weight_bytes();
        let lora = s.lora.weight_bytes();
        let gate = s.gate.clone();
        let rep = fuse_role(&mut s, profile).unwrap();
        assert_eq!(s.model.weight_bytes(), model);
        assert_eq!(s.lora.weight_bytes(), lora);
        assert_eq!(s.gate, gate);
        assert!(rep.blocks_frozen_verified);
        assert_eq!(rep.gate_growth, (3, 3));
        assert_eq!(rep.new_role_index, 3);
        let w = rep.fusion_weights.unwrap();
        assert_eq!(w.len(), 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s.registry.roles()[3].activation, Activation::Fusion(w));
    }

    #[test]
    fn duplicate_profile_fuses_to_the_original_gate_weights() {
        let mut s = small().state.clone();
        let k = 1;
        let original = s.registry.roles()[k].profile.clone();
        let rep = fuse_role(&mut s, RoleProfile::new("Twin", &original.profile_text)).unwrap();
        let reference = s.gate.weights_for(s.registry.embeddings().row(k)).unwrap();
        let w = rep.fusion_weights.unwrap();
        assert!(w.iter().zip(reference.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let x: Vec<f64> = (0..s.model.d_model()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let w0 = s.model.adapted_weight(AdaptedLayer::Hidden);
        let fused =
            lora_forward(&x, w0, &AdapterView::new(&s.lora, Activation::Fusion(w)).unwrap(), AdaptedLayer::Hidden)
                .unwrap();
        let direct = lora_forward(
            &x,
            w0,
            &AdapterView::new(&s.lora, Activation::Fusion(reference)).unwrap(),
            AdaptedLayer::Hidden,
        )
        .unwrap();
        assert!(fused.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn fusion_needs_a_trained_block() {
        let mut s = small().state.clone();
        s.lora = LoraModule::new(*s.lora.layout(), LoraMode::Partitioned, &s.model, 1).unwrap();
        assert!(matches!(fuse_role(&mut s, fourth_role().0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn expansion_grows_one_block_and_leaves_the_rest_alone() {
        let mut s = small().state.clone();
        let before = s.clone();
        let (profile, corpus) = fourth_role();
        let cfg = &before.config.adapter;
        let rep = expand_role(&mut s, profile, &corpus.train, cfg.learning_rate, cfg.epochs).unwrap();
        assert_eq!(rep.strategy, Strategy::Expansion);
        assert_eq!(rep.gate_growth, (3, 4));
        assert!(rep.blocks_frozen_verified);
        assert_eq!(s.lora.layout().roles(), 4);
        assert_eq!(s.lora.layout().total_rank(), 8);
        assert_eq!(s.config.layout, *s.lora.layout());
        for k in before.lora.layout().blocks() {
            assert_eq!(s.lora.block_digest(k).unwrap(), before.lora.block_digest(k).unwrap());
        }
        if !rep.gate_retrained {
            assert_eq!(s.gate.column_digests()[..3], before.gate.column_digests()[..]);
        }
        let x: Vec<f64> = (0..s.model.d_model()).map(|i| 0.2 - 0.05 * i as f64).collect();
        for layer in AdaptedLayer::ALL {
            let w0 = s.model.adapted_weight(layer);
            for k in before.lora.layout().blocks() {
                let old = lora_forward(&x, w0, &AdapterView::new(&before.lora, Activation::Block(k)).unwrap(), layer)
                    .unwrap();
                let new =
                    lora_forward(&x, w0, &AdapterView::new(&s.lora, Activation::Block(k)).unwrap(), layer).unwrap();
                assert_eq!(old, new);
            }
        }
        for (i, role) in before.registry.roles().iter().enumerate() {
            let r = crate::gating::route(&s.registry, &s.gate, &role.profile.profile_text).unwrap();
            assert_eq!(r.role, i);
            assert!(!r.gate_disagrees);
        }
        let new_block = Activation::Block(BlockId::new(4).unwrap());
        assert!(
            perplexity(&s, &new_block, &corpus.heldout).unwrap()
                < perplexity(&s, &Activation::None, &corpus.heldout).unwrap()
        );
    }

    #[test]
    fn expansion_errors_leave_the_state_unchanged() {
        let mut s = small().state.clone();
        let before = s.clone();
        let (profile, corpus) = fourth_role();
        assert!(expand_role(&mut s, profile, &[], 0.1, 1).is_err());
        let dup = RoleProfile::new(&before.registry.roles()[0].profile.name, "x");
        assert!(matches!(expand_role(&mut s, dup, &corpus.train, 0.1, 1), Err(Error::Conflict(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn fusion_roles_survive_expansion() {
        let mut s = small().state.clone();
        let (profile, corpus) = fourth_role();
        fuse_role(&mut s, RoleProfile::new("Blend", &profile.profile_text)).unwrap();
        expand_role(&mut s, profile, &corpus.train, 0.2, 2).unwrap();
        let Activation::Fusion(w) = &s.registry.roles()[3].activation else { panic!("fusion expected") };
        assert_eq!(w.len(), 4);
        assert_eq!(w[3], 0.0);
        assert!(AdapterView::new(&s.lora, Activation::Fusion(w.clone())).is_ok());
    }
}
