//! Analytic gradients against central finite differences, on small random
//! models so every parameter can be perturbed.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_grads, sequence_loss, ModelState, Vocabulary, LAYER_NAMES};
use crate::dynlora::{
    block_grads, Activation, AdaptedLayer, AdapterView, BlockId, BlockLayout, LoraFactors, LoraMode, LoraModule,
};
use crate::error::Result;
use crate::gating::{gate_loss_grad, Embedder, GatePair, GateState};
use crate::numerics::{finite_diff_grad, relative_error, Matrix};
use crate::rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Parameter checked, e.g. `backbone.hidden` or `block.output.B`.
    pub target: String,
    pub seed: u64,
    pub relative_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.relative_error < TOLERANCE
    }
}

const VOCAB: usize = 8;
const D: usize = 4;
const WINDOW: usize = 3;
const ROLES: usize = 3;
const RANK: usize = 2;

fn random_model(r: &mut rng::Rng) -> Result<ModelState> {
    let vocab = Vocabulary::new(["a", "b", "c", "d", "e"])?;
    let layers = vec![
        Matrix::gaussian(VOCAB, D, 1.0, r),
        Matrix::gaussian(D, D, 0.6, r),
        Matrix::gaussian(D, 1, 0.3, r),
        Matrix::gaussian(VOCAB, D, 0.8, r),
        Matrix::gaussian(VOCAB, 1, 0.3, r),
    ];
    ModelState::from_parts(vocab, WINDOW, layers)
}

fn random_module(r: &mut rng::Rng) -> Result<LoraModule> {
    let layout = BlockLayout::new(ROLES, RANK, RANK as f64)?;
    let total = layout.total_rank();
    let hidden = LoraFactors::new(Matrix::gaussian(D, total, 0.5, r), Matrix::gaussian(total, D, 0.5, r))?;
    let output = LoraFactors::new(Matrix::gaussian(VOCAB, total, 0.5, r), Matrix::gaussian(total, D, 0.5, r))?;
    let trained: BTreeSet<BlockId> = layout.blocks().collect();
    LoraModule::from_parts(layout, LoraMode::Partitioned, hidden, output, trained, 0)
}

fn random_sequence(r: &mut rng::Rng) -> Vec<usize> {
    (0..6).map(|_| r.random_range(3..VOCAB)).collect()
}

fn with_block(
    module: &LoraModule,
    k: BlockId,
    layer: AdaptedLayer,
    b: Option<&Matrix>,
    a: Option<&Matrix>,
) -> Result<LoraModule> {
    let start = module.layout().range(k)?.start;
    let mut factors = [module.factors(AdaptedLayer::Hidden).clone(), module.factors(AdaptedLayer::Output).clone()];
    let i = if layer == AdaptedLayer::Hidden { 0 } else { 1 };
    let (mut fb, mut fa) = (factors[i].b().clone(), factors[i].a().clone());
    if let Some(b) = b {
        fb.set_col_slice(start, b);
    }
    if let Some(a) = a {
        fa.set_row_slice(start, a);
    }
    factors[i] = LoraFactors::new(fb, fa)?;
    let [h, o] = factors;
    LoraModule::from_parts(*module.layout(), module.mode(), h, o, module.trained_blocks().clone(), module.seed())
}

/// Backbone layers, both factors of one block per adapted layer, and the gate,
/// for `seeds` seeds derived from `base_seed`.
pub fn run_gradient_checks(base_seed: u64, seeds: usize) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for s in 0..seeds as u64 {
        let seed = rng::derive(base_seed, s);
        let mut r = rng::stream(seed, 0);
        let model = random_model(&mut r)?;
        let seq = random_sequence(&mut r);

        let (_, grads) = backbone_grads(&seq, &model)?;
        let layers: Vec<Matrix> = model.layers().iter().map(|(_, m)| (*m).clone()).collect();
        for (idx, name) in LAYER_NAMES.iter().enumerate() {
            let numeric = finite_diff_grad(
                |w| {
                    let mut ls = layers.clone();
                    ls[idx] = w.clone();
                    let m = ModelState::from_parts(model.vocab().clone(), WINDOW, ls).expect("same shapes");
                    sequence_loss(&seq, &m, None).expect("valid sequence")
                },
                &layers[idx],
                STEP,
            )?;
            out.push(GradCheck {
                target: format!("backbone.{name}"),
                seed,
                relative_error: relative_error(&grads.layers[idx], &numeric)?,
            });
        }

        let module = random_module(&mut r)?;
        let k = BlockId::from_index(r.random_range(0..ROLES));
        let (_, bg) = block_grads(&module, &model, k, &seq)?;
        let range = module.layout().range(k)?;
        for layer in AdaptedLayer::ALL {
            let f = module.factors(layer);
            let bk = f.b().col_slice(range.start, range.end);
            let ak = f.a().row_slice(range.start, range.end);
            let loss = |m: LoraModule| {
                sequence_loss(&seq, &model, Some(&AdapterView::new(&m, Activation::Block(k)).expect("trained")))
                    .expect("valid")
            };
            let nb =
                finite_diff_grad(|b| loss(with_block(&module, k, layer, Some(b), None).expect("shape")), &bk, STEP)?;
            let na =
                finite_diff_grad(|a| loss(with_block(&module, k, layer, None, Some(a)).expect("shape")), &ak, STEP)?;
            let (db, da) = bg.layer(layer);
            out.push(GradCheck {
                target: format!("block.{}.B", layer.name()),
                seed,
                relative_error: relative_error(db, &nb)?,
            });
            out.push(GradCheck {
                target: format!("block.{}.A", layer.name()),
                seed,
                relative_error: relative_error(da, &na)?,
            });
        }

        let gate = GateState::from_matrix(Matrix::gaussian(6, ROLES, 0.8, &mut r))?;
        let embedding = Embedder::new(6, seed)?.embed("alpha beta gamma delta");
        let pair = GatePair { embedding, target: BlockId::from_index(r.random_range(0..ROLES)) };
        let (_, analytic) = gate_loss_grad(&gate, &pair)?;
        let numeric = finite_diff_grad(
            |w| gate_loss_grad(&GateState::from_matrix(w.clone()).expect("shape"), &pair).expect("valid").0,
            gate.matrix(),
            STEP,
        )?;
        out.push(GradCheck { target: "gate".into(), seed, relative_error: relative_error(&analytic, &numeric)? });
    }
    Ok(out)
}
