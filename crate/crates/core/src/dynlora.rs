//! Rank-partitioned low-rank adapters.
//!
//! One pair of factors `B ∈ R^{m×r}`, `A ∈ R^{r×d}` is kept per adapted
//! backbone matrix. The rank dimension is cut into `M` contiguous,
//! non-overlapping blocks of width `p` (so `r = M·p`); block `k` owns columns
//! `[(k−1)p, kp)` of `B` and the same rows of `A`. Training block `k` never
//! touches any other entry, so the forward path of every other block is
//! bit-for-bit unchanged.
//!
//! A single active block contributes `(α/p)·B_k A_k x`; fusion contributes the
//! weighted sum of the same per-block terms.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ModelState, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy_with_grad, dot, sha256_hex, Matrix, ProbVector};
use crate::rng;

/// Standard deviation of the Gaussian `A` initialisation.
pub const A_INIT_STD: f64 = 0.02;

/// Default number of passes over a role corpus.
pub const DEFAULT_EPOCHS: usize = 10;

/// Rank of the single shared block used by the forgetting comparator.
pub const DEFAULT_BASELINE_RANK: usize = 8;

/// Half-open rank range `((k−1)p, kp)` of 1-based block `k`.
pub fn block_range(k: usize, p: usize) -> Result<(usize, usize)> {
    if k == 0 || p == 0 {
        return Err(Error::invalid("block index and partial rank start at 1"));
    }
    Ok(((k - 1) * p, k * p))
}

/// 1-based block number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct BlockId(usize);

impl BlockId {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("block numbers start at 1"));
        }
        Ok(BlockId(k))
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Zero-based column of this block in the gate.
    pub fn index(self) -> usize {
        self.0 - 1
    }

    pub fn from_index(i: usize) -> Self {
        BlockId(i + 1)
    }
}

impl TryFrom<usize> for BlockId {
    type Error = Error;
    fn try_from(k: usize) -> Result<Self> {
        BlockId::new(k)
    }
}

impl From<BlockId> for usize {
    fn from(b: BlockId) -> usize {
        b.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {}", self.0)
    }
}

/// `M` blocks of partial rank `p`; the total rank is always `M·p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct BlockLayout {
    roles: usize,
    partial_rank: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    roles: usize,
    partial_rank: usize,
    alpha: f64,
}

impl TryFrom<RawLayout> for BlockLayout {
    type Error = Error;
    fn try_from(r: RawLayout) -> Result<Self> {
        BlockLayout::new(r.roles, r.partial_rank, r.alpha)
    }
}

impl From<BlockLayout> for RawLayout {
    fn from(l: BlockLayout) -> Self {
        RawLayout { roles: l.roles, partial_rank: l.partial_rank, alpha: l.alpha }
    }
}

impl BlockLayout {
    pub fn new(roles: usize, partial_rank: usize, alpha: f64) -> Result<Self> {
        if roles == 0 || partial_rank == 0 {
            return Err(Error::invalid("layout needs at least one block of rank at least 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(BlockLayout { roles, partial_rank, alpha })
    }

    /// Rejects any total rank other than `roles · partial_rank`.
    pub fn with_total_rank(roles: usize, partial_rank: usize, total_rank: usize, alpha: f64) -> Result<Self> {
        if roles.checked_mul(partial_rank) != Some(total_rank) {
            return Err(Error::invalid(format!(
                "total rank {total_rank} is not {roles} blocks x partial rank {partial_rank}"
            )));
        }
        BlockLayout::new(roles, partial_rank, alpha)
    }

    pub fn roles(&self) -> usize {
        self.roles
    }

    pub fn partial_rank(&self) -> usize {
        self.partial_rank
    }

    pub fn total_rank(&self) -> usize {
        self.roles * self.partial_rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Per-block scale `α/p`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.partial_rank as f64
    }

    pub fn range(&self, k: BlockId) -> Result<Range<usize>> {
        if k.get() > self.roles {
            return Err(Error::invalid(format!("{k} exceeds layout capacity {}", self.roles)));
        }
        let (s, e) = block_range(k.get(), self.partial_rank)?;
        Ok(s..e)
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> {
        (1..=self.roles).map(BlockId)
    }
}

/// Backbone matrices that carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptedLayer {
    Hidden,
    Output,
}

impl AdaptedLayer {
    pub const ALL: [AdaptedLayer; 2] = [AdaptedLayer::Hidden, AdaptedLayer::Output];

    pub fn name(self) -> &'static str {
        match self {
            AdaptedLayer::Hidden => "hidden",
            AdaptedLayer::Output => "output",
        }
    }

    fn stream(self) -> u64 {
        match self {
            AdaptedLayer::Hidden => 0,
            AdaptedLayer::Output => 1,
        }
    }
}

/// `B` (m×r) and `A` (r×d) for one adapted matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    b: Matrix,
    a: Matrix,
}

impl LoraFactors {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::invalid(format!("B has {} columns but A has {} rows", b.cols(), a.rows())));
        }
        Ok(LoraFactors { b, a })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    /// `B_k A_k x` for rank range `range`.
    fn block_delta(&self, range: &Range<usize>, x: &[f64], out: &mut [f64], weight: f64) {
        let z: Vec<f64> = range.clone().map(|r| dot(self.a.row(r), x)).collect();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.b.row(i)[range.clone()];
            *o += weight * dot(row, &z);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraMode {
    Partitioned,
    SharedBaseline,
}

/// Adapter factors for both adapted layers, their block layout and which
/// blocks have been trained.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    layout: BlockLayout,
    mode: LoraMode,
    hidden: LoraFactors,
    output: LoraFactors,
    trained: BTreeSet<BlockId>,
    seed: u64,
}

fn init_a_rows(seed: u64, k: BlockId, layer: AdaptedLayer, rows: usize, cols: usize) -> Matrix {
    let mut r = rng::stream(rng::derive(seed, k.get() as u64), layer.stream());
    Matrix::gaussian(rows, cols, A_INIT_STD, &mut r)
}

impl LoraModule {
    /// Zero `B`, Gaussian `A` (σ = 0.02). `A` rows of block `k` depend only on
    /// `(seed, k, layer)`, so a block grown later is initialised the same way
    /// it would have been at construction.
    pub fn new(layout: BlockLayout, mode: LoraMode, model: &ModelState, seed: u64) -> Result<Self> {
        if mode == LoraMode::SharedBaseline && layout.roles() != 1 {
            return Err(Error::invalid("the shared baseline uses a single block"));
        }
        let d = model.d_model();
        let dims = |layer: AdaptedLayer| match layer {
            AdaptedLayer::Hidden => (d, d),
            AdaptedLayer::Output => (model.vocab().len(), d),
        };
        let make = |layer: AdaptedLayer| {
            let (m, d) = dims(layer);
            let mut a = Matrix::zeros(0, d);
            for k in layout.blocks() {
                a.append_rows(&init_a_rows(seed, k, layer, layout.partial_rank(), d))?;
            }
            LoraFactors::new(Matrix::zeros(m, layout.total_rank()), a)
        };
        Ok(LoraModule {
            layout,
            mode,
            hidden: make(AdaptedLayer::Hidden)?,
            output: make(AdaptedLayer::Output)?,
            trained: BTreeSet::new(),
            seed,
        })
    }

    /// Single block of rank `rank`, scale `α/rank`.
    pub fn shared_baseline(rank: usize, alpha: f64, model: &ModelState, seed: u64) -> Result<Self> {
        LoraModule::new(BlockLayout::new(1, rank, alpha)?, LoraMode::SharedBaseline, model, seed)
    }

    /// Reassembles a module from stored parts, checking every shape.
    pub fn from_parts(
        layout: BlockLayout,
        mode: LoraMode,
        hidden: LoraFactors,
        output: LoraFactors,
        trained: BTreeSet<BlockId>,
        seed: u64,
    ) -> Result<Self> {
        for (name, f) in [("hidden", &hidden), ("output", &output)] {
            if f.b.cols() != layout.total_rank() || f.a.rows() != layout.total_rank() {
                return Err(Error::invalid(format!("{name} factors do not match rank {}", layout.total_rank())));
            }
        }
        if hidden.b.rows() != hidden.a.cols() || output.a.cols() != hidden.a.cols() {
            return Err(Error::invalid("adapter factor dimensions are inconsistent"));
        }
        if let Some(k) = trained.iter().find(|k| k.get() > layout.roles()) {
            return Err(Error::invalid(format!("trained {k} outside layout")));
        }
        Ok(LoraModule { layout, mode, hidden, output, trained, seed })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn mode(&self) -> LoraMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn factors(&self, layer: AdaptedLayer) -> &LoraFactors {
        match layer {
            AdaptedLayer::Hidden => &self.hidden,
            AdaptedLayer::Output => &self.output,
        }
    }

    fn factors_mut(&mut self, layer: AdaptedLayer) -> &mut LoraFactors {
        match layer {
            AdaptedLayer::Hidden => &mut self.hidden,
            AdaptedLayer::Output => &mut self.output,
        }
    }

    pub fn trained_blocks(&self) -> &BTreeSet<BlockId> {
        &self.trained
    }

    pub fn is_trained(&self, k: BlockId) -> bool {
        self.trained.contains(&k)
    }

    /// SHA-256 over the `B` columns and `A` rows of block `k` in both layers.
    pub fn block_digest(&self, k: BlockId) -> Result<String> {
        let range = self.layout.range(k)?;
        let mut bytes = Vec::new();
        for layer in AdaptedLayer::ALL {
            let f = self.factors(layer);
            bytes.extend(f.b.col_slice(range.start, range.end).to_le_bytes());
            bytes.extend(f.a.row_slice(range.start, range.end).to_le_bytes());
        }
        Ok(sha256_hex(&bytes))
    }

    /// Concatenated bytes of every factor matrix.
    pub fn weight_bytes(&self) -> Vec<u8> {
        AdaptedLayer::ALL
            .iter()
            .flat_map(|&l| {
                let f = self.factors(l);
                let mut v = f.b.to_le_bytes();
                v.extend(f.a.to_le_bytes());
                v
            })
            .collect()
    }

    /// Appends one block: `p` zero columns to every `B`, `p` Gaussian rows to
    /// every `A`. Existing entries are untouched.
    pub(crate) fn grow(&mut self) -> Result<BlockId> {
        if self.mode != LoraMode::Partitioned {
            return Err(Error::Unsupported("only partitioned modules can grow".into()));
        }
        let k = BlockId(self.layout.roles + 1);
        let p = self.layout.partial_rank;
        let seed = self.seed;
        for layer in AdaptedLayer::ALL {
            let f = self.factors_mut(layer);
            let (m, d) = (f.b.rows(), f.a.cols());
            f.b.append_cols(&Matrix::zeros(m, p))?;
            f.a.append_rows(&init_a_rows(seed, k, layer, p, d))?;
        }
        self.layout = BlockLayout::new(self.layout.roles + 1, p, self.layout.alpha)?;
        Ok(k)
    }
}

/// Which adapter blocks take part in a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Block(BlockId),
    Fusion(ProbVector),
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::None => write!(f, "base"),
            Activation::Block(k) => write!(f, "{k}"),
            Activation::Fusion(w) => write!(f, "fusion over {} blocks", w.len()),
        }
    }
}

/// A module together with the blocks active for one forward pass.
#[derive(Debug, Clone)]
pub struct AdapterView<'a> {
    module: &'a LoraModule,
    active: Activation,
    untrained: Vec<BlockId>,
}

impl<'a> AdapterView<'a> {
    /// Validates the activation. Requesting an untrained block is allowed
    /// (its contribution may be zero) and is recorded in [`Self::untrained_blocks`].
    pub fn new(module: &'a LoraModule, active: Activation) -> Result<Self> {
        let mut untrained = Vec::new();
        match &active {
            Activation::None => {}
            Activation::Block(k) => {
                module.layout.range(*k)?;
                if !module.is_trained(*k) {
                    untrained.push(*k);
                }
            }
            Activation::Fusion(w) => {
                if w.len() != module.layout.roles() {
                    return Err(Error::invalid(format!(
                        "fusion weights cover {} blocks, module has {}",
                        w.len(),
                        module.layout.roles()
                    )));
                }
                untrained.extend(module.layout.blocks().filter(|k| w[k.index()] > 0.0 && !module.is_trained(*k)));
            }
        }
        if !untrained.is_empty() {
            log::warn!("activating untrained adapter blocks {untrained:?}");
        }
        Ok(AdapterView { module, active, untrained })
    }

    pub fn module(&self) -> &LoraModule {
        self.module
    }

    pub fn active(&self) -> &Activation {
        &self.active
    }

    pub fn untrained_blocks(&self) -> &[BlockId] {
        &self.untrained
    }

    pub(crate) fn check_compatible(&self, model: &ModelState) -> Result<()> {
        let d = model.d_model();
        let h = &self.module.hidden;
        let o = &self.module.output;
        if h.b.rows() != d || h.a.cols() != d || o.b.rows() != model.vocab().len() || o.a.cols() != d {
            return Err(Error::invalid("adapter shapes do not match the backbone"));
        }
        Ok(())
    }

    /// `W_0 x` plus the active low-rank terms. Shapes are assumed checked.
    pub(crate) fn forward(&self, layer: AdaptedLayer, w0: &Matrix, x: &[f64]) -> Vec<f64> {
        let base = w0.matvec(x);
        let factors = self.module.factors(layer);
        let layout = &self.module.layout;
        let scale = layout.scale();
        let mut delta = vec![0.0; base.len()];
        match &self.active {
            Activation::None => return base,
            Activation::Block(k) => {
                let range = layout.range(*k).expect("validated in AdapterView::new");
                factors.block_delta(&range, x, &mut delta, scale);
            }
            Activation::Fusion(w) => {
                for k in layout.blocks() {
                    let range = layout.range(k).expect("block within layout");
                    factors.block_delta(&range, x, &mut delta, w[k.index()] * scale);
                }
            }
        }
        base.iter().zip(&delta).map(|(b, d)| b + d).collect()
    }
}

/// `W_0 x + ΔW x` for one adapted matrix under `view`.
pub fn lora_forward(x: &[f64], w0: &Matrix, view: &AdapterView<'_>, layer: AdaptedLayer) -> Result<Vec<f64>> {
    let f = view.module.factors(layer);
    if x.len() != w0.cols() || f.a.cols() != w0.cols() || f.b.rows() != w0.rows() {
        return Err(Error::invalid(format!(
            "lora_forward shapes: x {}, W0 {:?}, B {:?}, A {:?}",
            x.len(),
            w0.shape(),
            f.b.shape(),
            f.a.shape()
        )));
    }
    Ok(view.forward(layer, w0, x))
}

/// Gradient of the mean sequence loss with respect to one block's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    /// `(dB_k, dA_k)` for the hidden layer.
    pub hidden: (Matrix, Matrix),
    /// `(dB_k, dA_k)` for the output layer.
    pub output: (Matrix, Matrix),
}

impl BlockGrads {
    pub fn layer(&self, layer: AdaptedLayer) -> &(Matrix, Matrix) {
        match layer {
            AdaptedLayer::Hidden => &self.hidden,
            AdaptedLayer::Output => &self.output,
        }
    }
}

/// Mean next-token loss of `seq` with block `k` active, and its gradient with
/// respect to `B_k`, `A_k` of both adapted layers.
pub fn block_grads(module: &LoraModule, model: &ModelState, k: BlockId, seq: &[usize]) -> Result<(f64, BlockGrads)> {
    let range = module.layout.range(k)?;
    let s = module.layout.scale();
    let view = AdapterView { module, active: Activation::Block(k), untrained: Vec::new() };

    let slices = |layer: AdaptedLayer| {
        let f = module.factors(layer);
        (f.b.col_slice(range.start, range.end), f.a.row_slice(range.start, range.end))
    };
    let (bh, ah) = slices(AdaptedLayer::Hidden);
    let (bo, ao) = slices(AdaptedLayer::Output);
    let mut g_bh = Matrix::zeros(bh.rows(), bh.cols());
    let mut g_ah = Matrix::zeros(ah.rows(), ah.cols());
    let mut g_bo = Matrix::zeros(bo.rows(), bo.cols());
    let mut g_ao = Matrix::zeros(ao.rows(), ao.cols());

    let positions = backbone::training_positions(seq, model.context_window());
    let n = positions.len() as f64;
    let mut loss = 0.0;
    for (ctx, target) in positions {
        if target >= model.vocab().len() {
            return Err(Error::invalid(format!("token id {target} outside vocabulary")));
        }
        let t = backbone::trace(&ctx, model, Some(&view))?;
        let (l, mut dlogits) = cross_entropy_with_grad(&t.logits, target);
        loss += l / n;
        dlogits.iter_mut().for_each(|g| *g /= n);

        let z_o = ao.matvec(&t.hidden);
        g_bo.add_outer(s, &dlogits, &z_o);
        let mut dz_o = bo.matvec_t(&dlogits);
        dz_o.iter_mut().for_each(|g| *g *= s);
        g_ao.add_outer(1.0, &dz_o, &t.hidden);

        let mut dh = model.adapted_weight(AdaptedLayer::Output).matvec_t(&dlogits);
        for (a, b) in dh.iter_mut().zip(ao.matvec_t(&dz_o)) {
            *a += b;
        }
        let dpre: Vec<f64> = dh.iter().zip(&t.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();

        let z_h = ah.matvec(&t.pooled);
        g_bh.add_outer(s, &dpre, &z_h);
        let mut dz_h = bh.matvec_t(&dpre);
        dz_h.iter_mut().for_each(|g| *g *= s);
        g_ah.add_outer(1.0, &dz_h, &t.pooled);
    }
    Ok((loss, BlockGrads { hidden: (g_bh, g_ah), output: (g_bo, g_ao) }))
}

fn fit_block(
    module: &mut LoraModule,
    model: &ModelState,
    k: BlockId,
    corpus: &[TokenSequence],
    lr: f64,
    epochs: usize,
    shuffle_seed: u64,
) -> Result<()> {
    if corpus.iter().all(TokenSequence::is_empty) {
        return Err(Error::invalid("role corpus is empty"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let range = module.layout.range(k)?;
    let mut order: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].is_empty()).collect();
    let mut shuffle = rng::stream(shuffle_seed, 0);
    for _ in 0..epochs {
        order.shuffle(&mut shuffle);
        for &i in &order {
            let (_, grads) = block_grads(module, model, k, corpus[i].ids())?;
            for layer in AdaptedLayer::ALL {
                let (db, da) = grads.layer(layer);
                let f = module.factors_mut(layer);
                let b = crate::numerics::sgd_step(&f.b.col_slice(range.start, range.end), db, lr)?;
                let a = crate::numerics::sgd_step(&f.a.row_slice(range.start, range.end), da, lr)?;
                f.b.set_col_slice(range.start, &b);
                f.a.set_row_slice(range.start, &a);
            }
        }
    }
    module.trained.insert(k);
    Ok(())
}

/// Trains block `k` on one role's corpus. Only `B` columns and `A` rows inside
/// `block_range(k)` change.
pub fn train_block(
    module: &mut LoraModule,
    model: &ModelState,
    k: BlockId,
    corpus: &[TokenSequence],
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<()> {
    if module.mode != LoraMode::Partitioned {
        return Err(Error::invalid("train_block requires a partitioned module"));
    }
    fit_block(module, model, k, corpus, lr, epochs, rng::derive(seed, k.get() as u64))
}

/// Fine-tunes the single shared block on each corpus in arrival order. The
/// i-th corpus is shuffled exactly as block `i+1` would be in [`train_block`].
pub fn train_shared_baseline(
    module: &mut LoraModule,
    model: &ModelState,
    corpora: &[&[TokenSequence]],
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<()> {
    if module.mode != LoraMode::SharedBaseline {
        return Err(Error::invalid("train_shared_baseline requires a shared-baseline module"));
    }
    if corpora.is_empty() {
        return Err(Error::invalid("no corpora supplied"));
    }
    let k = BlockId(1);
    for (i, corpus) in corpora.iter().enumerate() {
        fit_block(module, model, k, corpus, lr, epochs, rng::derive(seed, i as u64 + 1))?;
    }
    Ok(())
}
