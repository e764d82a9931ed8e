//! The frozen base language model: a fixed-window next-token predictor.
//!
//! Context tokens are embedded and mean-pooled, passed through one tanh hidden
//! layer and projected to vocabulary logits:
//!
//! ```text
//! x      = mean(E[ctx])
//! h      = tanh(W_h x + ΔW_h x + b_h)
//! logits = W_o h + ΔW_o h + b_o
//! ```
//!
//! `W_h` and `W_o` are the matrices that low-rank adapters attach to.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::dynlora::{AdaptedLayer, AdapterView};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cross_entropy_with_grad, sgd_update, softmax, Matrix};
use crate::rng;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Ordered, duplicate-free token list with the three special tokens at 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens. Tokens are lowercased.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN].iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(|t| t.as_ref().to_lowercase()));
        Self::from_full_list(all)
    }

    /// Reconstructs a vocabulary from its complete token list, specials included.
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::invalid("vocabulary needs at least one non-special token"));
        }
        if tokens[BOS] != BOS_TOKEN || tokens[EOS] != EOS_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::invalid("special tokens must occupy indices 0, 1, 2"));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Vocabulary of every whitespace token seen at least `min_freq` times,
    /// in order of first appearance.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for text in texts {
            for word in text.split_whitespace() {
                let w = word.to_lowercase();
                let c = counts.entry(w.clone()).or_insert(0);
                if *c == 0 {
                    order.push(w);
                }
                *c += 1;
            }
        }
        let special = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        Vocabulary::new(order.into_iter().filter(|w| counts[w] >= min_freq.max(1) && !special.contains(&w.as_str())))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids; validity against a vocabulary is checked where they are consumed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let words: Vec<&str> = self.0.iter().map(|&i| vocab.token(i).unwrap_or(UNK_TOKEN)).collect();
        words.join(" ")
    }
}

impl AsRef<[usize]> for TokenSequence {
    fn as_ref(&self) -> &[usize] {
        &self.0
    }
}

/// Whitespace split, lowercase, unknown words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    TokenSequence(text.split_whitespace().map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub context_window: usize,
    pub d_model: usize,
    /// Standard deviation of the embedding and output initialisation.
    pub init_std: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { context_window: 8, d_model: 32, init_std: 0.1, learning_rate: 0.1, epochs: 4, seed: 1 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_window == 0 || self.d_model == 0 || self.epochs == 0 {
            return Err(Error::invalid("backbone counts must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::invalid("backbone learning rate and init std must be positive"));
        }
        Ok(())
    }
}

/// Layer names in serialization order.
pub const LAYER_NAMES: [&str; 5] = ["embedding", "hidden", "hidden_bias", "output", "output_bias"];

/// Backbone weights. Once built by [`pretrain_base`] or [`ModelState::from_parts`]
/// the state is frozen: nothing in the public API mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    vocab: Vocabulary,
    context_window: usize,
    d_model: usize,
    embedding: Matrix,
    hidden: Matrix,
    hidden_bias: Matrix,
    output: Matrix,
    output_bias: Matrix,
    frozen: bool,
}

impl ModelState {
    /// Reassembles a frozen model from its named layers (see [`LAYER_NAMES`]).
    pub fn from_parts(vocab: Vocabulary, context_window: usize, layers: Vec<Matrix>) -> Result<Self> {
        let [embedding, hidden, hidden_bias, output, output_bias]: [Matrix; 5] =
            layers.try_into().map_err(|_| Error::invalid("backbone needs exactly five layers"))?;
        let v = vocab.len();
        let d = embedding.cols();
        let expect = [
            (embedding.shape(), (v, d)),
            (hidden.shape(), (d, d)),
            (hidden_bias.shape(), (d, 1)),
            (output.shape(), (v, d)),
            (output_bias.shape(), (v, 1)),
        ];
        for (name, (got, want)) in LAYER_NAMES.iter().zip(expect) {
            if got != want {
                return Err(Error::invalid(format!("layer {name} has shape {got:?}, expected {want:?}")));
            }
        }
        if context_window == 0 || d == 0 {
            return Err(Error::invalid("context window and d_model must be at least 1"));
        }
        Ok(ModelState {
            vocab,
            context_window,
            d_model: d,
            embedding,
            hidden,
            hidden_bias,
            output,
            output_bias,
            frozen: true,
        })
    }

    fn init(vocab: Vocabulary, config: &BackboneConfig) -> Self {
        let v = vocab.len();
        let d = config.d_model;
        let mut r = rng::stream(config.seed, 0);
        let embedding = Matrix::gaussian(v, d, 1.0, &mut r);
        let hidden = Matrix::gaussian(d, d, 1.0 / libm::sqrt(d as f64), &mut r);
        let output = Matrix::gaussian(v, d, config.init_std, &mut r);
        ModelState {
            vocab,
            context_window: config.context_window,
            d_model: d,
            embedding,
            hidden,
            hidden_bias: Matrix::zeros(d, 1),
            output,
            output_bias: Matrix::zeros(v, 1),
            frozen: false,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Named layers in [`LAYER_NAMES`] order.
    pub fn layers(&self) -> [(&'static str, &Matrix); 5] {
        [
            (LAYER_NAMES[0], &self.embedding),
            (LAYER_NAMES[1], &self.hidden),
            (LAYER_NAMES[2], &self.hidden_bias),
            (LAYER_NAMES[3], &self.output),
            (LAYER_NAMES[4], &self.output_bias),
        ]
    }

    /// The frozen matrix an adapter attaches to.
    pub fn adapted_weight(&self, layer: AdaptedLayer) -> &Matrix {
        match layer {
            AdaptedLayer::Hidden => &self.hidden,
            AdaptedLayer::Output => &self.output,
        }
    }

    /// Concatenated little-endian bytes of every layer.
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.layers().iter().flat_map(|(_, m)| m.to_le_bytes()).collect()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub ctx: Vec<usize>,
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

fn check_context(ctx: &[usize], model: &ModelState) -> Result<()> {
    if ctx.is_empty() {
        return Err(Error::invalid("context must not be empty"));
    }
    if ctx.len() > model.context_window {
        return Err(Error::invalid(format!("context of {} tokens exceeds window {}", ctx.len(), model.context_window)));
    }
    if let Some(&bad) = ctx.iter().find(|&&t| t >= model.vocab.len()) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

pub(crate) fn trace(ctx: &[usize], model: &ModelState, adapter: Option<&AdapterView<'_>>) -> Result<Trace> {
    check_context(ctx, model)?;
    if let Some(view) = adapter {
        view.check_compatible(model)?;
    }
    let d = model.d_model;
    let mut pooled = vec![0.0; d];
    for &t in ctx {
        for (p, e) in pooled.iter_mut().zip(model.embedding.row(t)) {
            *p += e;
        }
    }
    let n = ctx.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);

    let mut pre = project(model, AdaptedLayer::Hidden, &pooled, adapter);
    for (a, b) in pre.iter_mut().zip(model.hidden_bias.data()) {
        *a += b;
    }
    let hidden: Vec<f64> = pre.iter().map(|&a| libm::tanh(a)).collect();

    let mut logits = project(model, AdaptedLayer::Output, &hidden, adapter);
    for (l, b) in logits.iter_mut().zip(model.output_bias.data()) {
        *l += b;
    }
    Ok(Trace { ctx: ctx.to_vec(), pooled, hidden, logits })
}

fn project(model: &ModelState, layer: AdaptedLayer, x: &[f64], adapter: Option<&AdapterView<'_>>) -> Vec<f64> {
    let w0 = model.adapted_weight(layer);
    match adapter {
        Some(view) => view.forward(layer, w0, x),
        None => w0.matvec(x),
    }
}

/// Vocabulary logits for `ctx` (at most `context_window` tokens), optionally
/// through an adapter.
pub fn forward_base(ctx: &[usize], model: &ModelState, adapter: Option<&AdapterView<'_>>) -> Result<Vec<f64>> {
    Ok(trace(ctx, model, adapter)?.logits)
}

/// Greedy (argmax, lowest-index tie-break) when `temperature == 0`, otherwise a
/// seeded draw from `softmax(logits / temperature)`.
pub fn sample_next(logits: &[f64], temperature: f64, seed: u64) -> Result<usize> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("logits must be non-empty and finite"));
    }
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::invalid("temperature must be non-negative"));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = softmax(&scaled)?;
    let dist = WeightedIndex::new(probs.iter().copied()).map_err(|e| Error::invalid(format!("cannot sample: {e}")))?;
    Ok(dist.sample(&mut rng::stream(seed, 0)))
}

/// Next-token training pairs of a sequence: `[BOS] ++ seq` predicts `seq ++ [EOS]`,
/// each context truncated on the left to `window` tokens.
pub fn training_positions(seq: &[usize], window: usize) -> Vec<(Vec<usize>, usize)> {
    let mut padded = Vec::with_capacity(seq.len() + 1);
    padded.push(BOS);
    padded.extend_from_slice(seq);
    (0..=seq.len())
        .map(|i| {
            let end = i + 1;
            let start = end.saturating_sub(window);
            let target = if i < seq.len() { seq[i] } else { EOS };
            (padded[start..end].to_vec(), target)
        })
        .collect()
}

/// Mean next-token cross-entropy of one sequence.
pub fn sequence_loss(seq: &[usize], model: &ModelState, adapter: Option<&AdapterView<'_>>) -> Result<f64> {
    let (total, n) = corpus_loss_sum(core::slice::from_ref(&seq), model, adapter)?;
    Ok(total / n as f64)
}

/// Sum of next-token losses and number of predicted positions over a corpus.
pub fn corpus_loss_sum<S: AsRef<[usize]>>(
    seqs: &[S],
    model: &ModelState,
    adapter: Option<&AdapterView<'_>>,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut n = 0;
    for seq in seqs {
        for (ctx, target) in training_positions(seq.as_ref(), model.context_window) {
            check_target(target, model)?;
            let t = trace(&ctx, model, adapter)?;
            total += crate::numerics::log_sum_exp(&t.logits) - t.logits[target];
            n += 1;
        }
    }
    Ok((total, n))
}

fn check_target(target: usize, model: &ModelState) -> Result<()> {
    if target >= model.vocab.len() {
        return Err(Error::invalid(format!("token id {target} outside vocabulary")));
    }
    Ok(())
}

/// Gradients of the mean sequence loss with respect to every backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub layers: [Matrix; 5],
}

/// Mean loss of `seq` and its gradient with respect to all backbone layers
/// (no adapter).
pub fn backbone_grads(seq: &[usize], model: &ModelState) -> Result<(f64, BackboneGrads)> {
    let v = model.vocab.len();
    let d = model.d_model;
    let mut g_emb = Matrix::zeros(v, d);
    let mut g_hid = Matrix::zeros(d, d);
    let mut g_hb = Matrix::zeros(d, 1);
    let mut g_out = Matrix::zeros(v, d);
    let mut g_ob = Matrix::zeros(v, 1);

    let positions = training_positions(seq, model.context_window);
    let scale = 1.0 / positions.len() as f64;
    let mut loss = 0.0;
    for (ctx, target) in positions {
        check_target(target, model)?;
        let t = trace(&ctx, model, None)?;
        let (l, mut dlogits) = cross_entropy_with_grad(&t.logits, target);
        loss += l * scale;
        dlogits.iter_mut().for_each(|g| *g *= scale);

        g_out.add_outer(1.0, &dlogits, &t.hidden);
        for (i, g) in dlogits.iter().enumerate() {
            g_ob.set(i, 0, g_ob.get(i, 0) + g);
        }
        let dh = model.output.matvec_t(&dlogits);
        let dpre: Vec<f64> = dh.iter().zip(&t.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
        g_hid.add_outer(1.0, &dpre, &t.pooled);
        for (i, g) in dpre.iter().enumerate() {
            g_hb.set(i, 0, g_hb.get(i, 0) + g);
        }
        let dx = model.hidden.matvec_t(&dpre);
        let share = 1.0 / t.ctx.len() as f64;
        for &tok in &t.ctx {
            for (j, g) in dx.iter().enumerate() {
                g_emb.set(tok, j, g_emb.get(tok, j) + g * share);
            }
        }
    }
    Ok((loss, BackboneGrads { layers: [g_emb, g_hid, g_hb, g_out, g_ob] }))
}

/// Trains every backbone layer by per-sequence SGD on next-token
/// cross-entropy, then freezes the model. Tokens that never appear as context
/// take the start-of-sequence embedding, so unknown words and turn tags read
/// as segment boundaries.
pub fn pretrain_base(data: &[TokenSequence], vocab: Vocabulary, config: &BackboneConfig) -> Result<ModelState> {
    config.validate()?;
    if data.iter().all(TokenSequence::is_empty) {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    if let Some(bad) = data.iter().flat_map(|s| s.ids()).find(|&&t| t >= vocab.len()) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
    }
    let mut model = ModelState::init(vocab, config);
    let mut order: Vec<usize> = (0..data.len()).filter(|&i| !data[i].is_empty()).collect();
    let mut shuffle = rng::stream(config.seed, 1);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for &i in &order {
            let (_, grads) = backbone_grads(data[i].ids(), &model)?;
            let [g_emb, g_hid, g_hb, g_out, g_ob] = &grads.layers;
            let lr = config.learning_rate;
            sgd_update(&mut model.embedding, g_emb, lr)?;
            sgd_update(&mut model.hidden, g_hid, lr)?;
            sgd_update(&mut model.hidden_bias, g_hb, lr)?;
            sgd_update(&mut model.output, g_out, lr)?;
            sgd_update(&mut model.output_bias, g_ob, lr)?;
        }
    }
    let mut seen = vec![false; model.vocab.len()];
    seen[BOS] = true;
    for s in data.iter().filter(|s| !s.is_empty()) {
        s.ids()[..s.len() - 1].iter().for_each(|&t| seen[t] = true);
    }
    let start = model.embedding.row_slice(BOS, 1);
    for t in (0..seen.len()).filter(|&t| !seen[t]) {
        model.embedding.set_row_slice(t, &start);
    }
    model.frozen = true;
    Ok(model)
}

/// Greedy continuation of `prompt` until EOS or `max_tokens`.
pub fn greedy_decode(
    prompt: &[usize],
    model: &ModelState,
    adapter: Option<&AdapterView<'_>>,
    max_tokens: usize,
) -> Result<Vec<usize>> {
    let mut ctx: Vec<usize> = prompt.to_vec();
    if ctx.is_empty() {
        ctx.push(BOS);
    }
    let mut out = Vec::new();
    for _ in 0..max_tokens {
        let start = ctx.len().saturating_sub(model.context_window);
        let next = argmax(&forward_base(&ctx[start..], model, adapter)?);
        if next == EOS {
            break;
        }
        out.push(next);
        ctx.push(next);
    }
    Ok(out)
}
