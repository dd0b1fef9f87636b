//! Second pre-training: the base LM trained jointly with Tok and Detok on
//! three losses (LM, embedding, generation) plus periodic cycle batches.
//! Plain LM pre-training runs through the same loop with Tok switched off.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::detok::GenMode;
use crate::error::{Error, Result};
use crate::lm::{self, BaseLm, Objective};
use crate::math::{self, Real};
use crate::model::Bundle;
use crate::optim::{Adam, AdamConfig, WarmupLinear};
use crate::params::ParamStore;
use crate::policy::{check_alignment, Policy, Role, WordSelector};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, TokenSequence, Vocabulary};

/// Pooling of several token embeddings into one target vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Agg {
    #[default]
    MaxPool,
    MeanPool,
    FirstToken,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossWeights {
    pub lm: Real,
    pub embedding: Real,
    pub generation: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lm: 1.0,
            embedding: 1.0,
            generation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PolicySet {
    pub usage: Policy,
    pub loss: Policy,
    pub generation: Policy,
}

impl PolicySet {
    pub fn none() -> Self {
        Self {
            usage: Policy::None,
            loss: Policy::None,
            generation: Policy::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.usage.validate()?;
        self.loss.validate()?;
        self.generation.validate()
    }
}

impl Default for PolicySet {
    fn default() -> Self {
        Self {
            usage: Policy::AllMulti,
            loss: Policy::RandomFraction { p: 0.15, seed: 0 },
            generation: Policy::AllWords,
        }
    }
}

/// Optimisation settings shared by pre-training and second pre-training.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub lr: Real,
    pub warmup_fraction: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_fraction: 0.05,
            batch_size: 16,
            epochs: 1,
            max_steps: None,
            adam: AdamConfig {
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig {
                field: "batch_size",
                reason: "batch_size and epochs must be positive".into(),
            });
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig {
                field: "lr",
                reason: "lr must be non-negative and warmup_fraction in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CycleConfig {
    /// One cycle batch after every `interval` LM steps.
    pub interval: usize,
    /// Number of most frequent corpus words td batches draw from.
    pub pool_size: usize,
    /// Words (td) or vectors (dt) per cycle batch.
    pub batch_size: usize,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            interval: 200,
            pool_size: 2000,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TwoPtConfig {
    pub train: TrainConfig,
    pub policies: PolicySet,
    pub agg: Agg,
    pub weights: LossWeights,
    pub cycle: CycleConfig,
}

impl TwoPtConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.policies.validate()?;
        if self.cycle.interval == 0 {
            return Err(Error::InvalidConfig {
                field: "cycle.interval",
                reason: "must be at least 1".into(),
            });
        }
        if self.cycle.batch_size == 0 || self.cycle.batch_size > self.cycle.pool_size {
            return Err(Error::InvalidConfig {
                field: "cycle.batch_size",
                reason: "must satisfy 1 <= batch_size <= pool_size".into(),
            });
        }
        let w = self.weights;
        if [w.lm, w.embedding, w.generation].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidConfig {
                field: "weights",
                reason: "loss weights must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// A sequence with its word selections and mask positions fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub index: u64,
    pub seq: TokenSequence,
    pub usage: Vec<usize>,
    pub loss: Vec<usize>,
    pub generation: Vec<usize>,
    /// Original token indices replaced by the mask token.
    pub masked: Vec<usize>,
}

/// Applies the policies, checks their alignment and draws mask positions
/// (masked objective only) among tokens of words left to the embedding table.
pub fn prepare(
    seq: TokenSequence,
    index: u64,
    policies: &PolicySet,
    vocab: &Vocabulary,
    objective: Objective,
    mask_fraction: Real,
    mask_rng: &mut Rng,
) -> Result<Prepared> {
    let usage = policies.usage.select(Role::Usage, &seq, vocab, index);
    let loss = policies.loss.select(Role::Loss, &seq, vocab, index);
    let generation = policies.generation.select(Role::Generation, &seq, vocab, index);
    check_alignment(&usage, &generation, &seq)?;
    let masked = if objective == Objective::Masked {
        let mut used = vec![false; seq.word_count()];
        usage.iter().for_each(|&w| used[w] = true);
        let candidates: Vec<usize> = seq
            .spans
            .iter()
            .enumerate()
            .filter(|(w, _)| !used[*w])
            .flat_map(|(_, s)| s.start..s.end)
            .collect();
        lm::choose_masked(&candidates, mask_fraction, mask_rng)
    } else {
        Vec::new()
    };
    Ok(Prepared {
        index,
        seq,
        usage,
        loss,
        generation,
        masked,
    })
}

/// What an input row of the (possibly shortened) model input holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Embedding-table row for the token at this original index.
    Token(usize),
    /// Tok vector for this word.
    Word(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    pub slots: Vec<Slot>,
    /// Representative input position per word: its Tok slot, else its first token.
    pub word_pos: Vec<usize>,
    /// Input position of each original token, `None` when replaced by Tok.
    pub token_pos: Vec<Option<usize>>,
}

impl Alignment {
    pub fn new(seq: &TokenSequence, usage: &[usize]) -> Self {
        let mut used = vec![false; seq.word_count()];
        usage.iter().for_each(|&w| used[w] = true);
        let mut a = Alignment {
            slots: Vec::with_capacity(seq.len()),
            word_pos: Vec::with_capacity(seq.word_count()),
            token_pos: vec![None; seq.len()],
        };
        for (w, span) in seq.spans.iter().enumerate() {
            a.word_pos.push(a.slots.len());
            if used[w] {
                a.slots.push(Slot::Word(w));
            } else {
                for t in span.start..span.end {
                    a.token_pos[t] = Some(a.slots.len());
                    a.slots.push(Slot::Token(t));
                }
            }
        }
        a
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Builds the model input for one sequence. `ids` are the (possibly masked)
/// token ids; `tok_rows` holds one Tok vector per usage word in ascending
/// word order.
pub fn assemble_input(
    tape: &mut Tape,
    store: &ParamStore,
    lm: &BaseLm,
    seq: &TokenSequence,
    ids: &[TokenId],
    usage: &[usize],
    tok_rows: Option<Var>,
) -> Result<(Var, Alignment)> {
    let align = Alignment::new(seq, usage);
    if align.is_empty() {
        return Err(Error::Empty("input sequence"));
    }
    if align.len() > lm.config.max_seq_len {
        return Err(Error::Overlength {
            len: align.len(),
            max: lm.config.max_seq_len,
        });
    }
    let token_ids: Vec<TokenId> = align
        .slots
        .iter()
        .filter_map(|s| match *s {
            Slot::Token(t) => Some(ids[t]),
            Slot::Word(_) => None,
        })
        .collect();
    let n_tok = token_ids.len();
    let rows = if usage.is_empty() {
        lm.token_rows(tape, store, &token_ids)?
    } else {
        let tok_rows = tok_rows.ok_or(Error::Empty("Tok rows for usage words"))?;
        if tape.shape(tok_rows)[0] != usage.len() {
            return Err(Error::Shape {
                op: "assemble_input",
                lhs: tape.shape(tok_rows).to_vec(),
                rhs: vec![usage.len()],
            });
        }
        let combined = if n_tok == 0 {
            tok_rows
        } else {
            let emb = lm.token_rows(tape, store, &token_ids)?;
            tape.concat(&[emb, tok_rows], 0)?
        };
        let (mut ti, mut wi) = (0, n_tok);
        let perm: Vec<usize> = align
            .slots
            .iter()
            .map(|s| match s {
                Slot::Token(_) => {
                    ti += 1;
                    ti - 1
                }
                Slot::Word(_) => {
                    wi += 1;
                    wi - 1
                }
            })
            .collect();
        tape.gather_rows(combined, &perm)?
    };
    let x = lm.add_positions(tape, store, rows)?;
    Ok((x, align))
}

/// Model input with the usage-selected words replaced by their Tok vectors.
pub fn build_input(
    tape: &mut Tape,
    bundle: &Bundle,
    seq: &TokenSequence,
    usage: &[usize],
) -> Result<(Var, Alignment)> {
    let tok_rows = if usage.is_empty() {
        None
    } else {
        let tok = bundle.tok()?;
        let words: Vec<&str> = usage.iter().map(|&w| seq.spans[w].word.as_str()).collect();
        Some(tok.encode_batch(tape, &bundle.store, &bundle.chars, &words)?)
    };
    assemble_input(tape, &bundle.store, &bundle.lm, seq, &seq.ids, usage, tok_rows)
}

/// Pooled embedding-table rows of a word's tokens.
pub fn embedding_target(table: &Tensor, ids: &[TokenId], agg: Agg) -> Result<Vec<Real>> {
    let first = *ids.first().ok_or(Error::Empty("word tokens"))?;
    for &i in ids {
        if i >= table.rows() {
            return Err(Error::OutOfRange {
                what: "token id",
                index: i,
                size: table.rows(),
            });
        }
    }
    let mut out = table.row(first).to_vec();
    match agg {
        Agg::FirstToken => {}
        Agg::MaxPool => {
            for &i in &ids[1..] {
                for (o, &v) in out.iter_mut().zip(table.row(i)) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
        Agg::MeanPool => {
            for &i in &ids[1..] {
                for (o, &v) in out.iter_mut().zip(table.row(i)) {
                    *o += v;
                }
            }
            let n = ids.len() as Real;
            out.iter_mut().for_each(|o| *o /= n);
        }
    }
    Ok(out)
}

/// Mean euclidean distance between Tok rows `tok[n, d]` and fixed targets.
pub fn embedding_loss(tape: &mut Tape, tok: Var, targets: Tensor) -> Result<Var> {
    let y = tape.constant(targets);
    let dist = tape.euclidean_distance(tok, y)?;
    tape.mean(dist)
}

/// `k` vectors with i.i.d. `N(0, 1/d)` entries: norms concentrate near 1.
pub fn sample_sphere_vectors(k: usize, d: usize, seed: u64) -> Tensor {
    sphere_from(&mut rng::substream(seed, "sphere"), k, d)
}

fn sphere_from(rng: &mut Rng, k: usize, d: usize) -> Tensor {
    let scale = 1.0 / math::sqrt(d as Real);
    let mut t = Tensor::zeros(&[k, d]);
    for x in t.data_mut() {
        let z: Real = StandardNormal.sample(rng);
        *x = z * scale;
    }
    t
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: Option<Var>,
    pub lm: Option<Var>,
    pub embedding: Option<Var>,
    pub generation: Option<Var>,
}

/// The weighted 2PT loss of a prepared batch. Terms with zero weight, or with
/// nothing selected, are not built at all.
pub fn twopt_loss(
    tape: &mut Tape,
    bundle: &Bundle,
    batch: &[Prepared],
    weights: &LossWeights,
    agg: Agg,
) -> Result<LossParts> {
    twopt_loss_with_targets(tape, bundle, batch, weights, agg, bundle.store.get(bundle.lm.embedding))
}

/// [`twopt_loss`] with embedding-loss targets pooled from `target_table`
/// instead of the live embedding table. Gradient checks use this to hold the
/// detached targets fixed while the table is perturbed.
pub fn twopt_loss_with_targets(
    tape: &mut Tape,
    bundle: &Bundle,
    batch: &[Prepared],
    weights: &LossWeights,
    agg: Agg,
    target_table: &Tensor,
) -> Result<LossParts> {
    let store = &bundle.store;
    let lm = &bundle.lm;
    let objective = lm.config.objective;
    let use_emb = weights.embedding > 0.0 && batch.iter().any(|p| !p.loss.is_empty());
    let use_gen = weights.generation > 0.0 && batch.iter().any(|p| !p.generation.is_empty());
    let need_tok = use_emb || batch.iter().any(|p| !p.usage.is_empty());

    // One Tok pass over every word that needs a Tok vector.
    let mut tok_words: Vec<&str> = Vec::new();
    let mut usage_off = Vec::with_capacity(batch.len());
    let mut loss_off = Vec::with_capacity(batch.len());
    for p in batch {
        usage_off.push(tok_words.len());
        tok_words.extend(p.usage.iter().map(|&w| p.seq.spans[w].word.as_str()));
        loss_off.push(tok_words.len());
        if use_emb {
            tok_words.extend(p.loss.iter().map(|&w| p.seq.spans[w].word.as_str()));
        }
    }
    let tok_all = if need_tok && !tok_words.is_empty() {
        Some(bundle.tok()?.encode_batch(tape, store, &bundle.chars, &tok_words)?)
    } else {
        None
    };

    let mask_id = bundle.vocab.mask_id();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut aligns = Vec::with_capacity(batch.len());
    for (p, &off) in batch.iter().zip(&usage_off) {
        let mut ids = p.seq.ids.clone();
        if !p.masked.is_empty() {
            let m = mask_id.ok_or(Error::MissingParam("[MASK] token".into()))?;
            p.masked.iter().for_each(|&t| ids[t] = m);
        }
        let rows = match tok_all {
            Some(all) if !p.usage.is_empty() => {
                let idx: Vec<usize> = (off..off + p.usage.len()).collect();
                Some(tape.gather_rows(all, &idx)?)
            }
            _ => None,
        };
        let (x, a) = assemble_input(tape, store, lm, &p.seq, &ids, &p.usage, rows)?;
        inputs.push(x);
        aligns.push(a);
    }
    let encs = lm.forward_batch(tape, store, &inputs)?;

    let mut parts = LossParts::default();
    let mut terms: Vec<(Real, Var)> = Vec::new();

    if weights.lm > 0.0 {
        let mut hs = Vec::new();
        let mut targets = Vec::new();
        for ((p, a), e) in batch.iter().zip(&aligns).zip(&encs) {
            let pos: Vec<(usize, TokenId)> = match objective {
                Objective::Masked => p
                    .masked
                    .iter()
                    .map(|&t| (a.token_pos[t].expect("masked tokens are embedded"), p.seq.ids[t]))
                    .collect(),
                Objective::Autoregressive => a
                    .slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| match *s {
                        Slot::Token(t) => Some((i, p.seq.ids[t])),
                        Slot::Word(_) => None,
                    })
                    .collect(),
            };
            if pos.is_empty() {
                continue;
            }
            let rows: Vec<usize> = pos.iter().map(|x| x.0).collect();
            hs.push(tape.gather_rows(e.hidden, &rows)?);
            targets.extend(pos.iter().map(|x| x.1));
        }
        if !hs.is_empty() {
            let h = if hs.len() == 1 { hs[0] } else { tape.concat(&hs, 0)? };
            let z = lm.logits(tape, store, h)?;
            let l = lm::lm_loss(tape, z, &targets)?;
            parts.lm = Some(l);
            terms.push((weights.lm, l));
        }
    }

    if use_emb {
        let table = target_table;
        let mut idx = Vec::new();
        let mut tgt = Vec::new();
        for (p, &off) in batch.iter().zip(&loss_off) {
            for (j, &w) in p.loss.iter().enumerate() {
                idx.push(off + j);
                tgt.extend(embedding_target(table, p.seq.word_ids(w), agg)?);
            }
        }
        let n = idx.len();
        let rows = tape.gather_rows(tok_all.expect("Tok rows computed"), &idx)?;
        let l = embedding_loss(tape, rows, Tensor::new(vec![n, lm.config.d], tgt)?)?;
        parts.embedding = Some(l);
        terms.push((weights.embedding, l));
    } else if weights.embedding > 0.0 {
        log::debug!("embedding loss skipped: no words selected");
    }

    if use_gen {
        let detok = bundle.detok()?;
        let mut hs = Vec::new();
        let mut words: Vec<&str> = Vec::new();
        for ((p, a), e) in batch.iter().zip(&aligns).zip(&encs) {
            if p.generation.is_empty() {
                continue;
            }
            let rows: Vec<usize> = p.generation.iter().map(|&w| a.word_pos[w]).collect();
            hs.push(tape.gather_rows(e.hidden, &rows)?);
            words.extend(p.generation.iter().map(|&w| p.seq.spans[w].word.as_str()));
        }
        let h = if hs.len() == 1 { hs[0] } else { tape.concat(&hs, 0)? };
        let per_word = detok.teacher_forced_loss(tape, store, &bundle.chars, h, &words)?;
        let l = tape.mean(per_word)?;
        parts.generation = Some(l);
        terms.push((weights.generation, l));
    }

    let mut total: Option<Var> = None;
    for (w, l) in terms {
        let s = if w == 1.0 { l } else { tape.scale(l, w) };
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    parts.total = total;
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Lm,
    Td,
    Dt,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            RowKind::Lm => "lm",
            RowKind::Td => "td",
            RowKind::Dt => "dt",
        }
    }
}

/// One row of the loss trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossReport {
    /// LM steps completed when the row was produced.
    pub step: usize,
    pub kind: RowKind,
    pub lm_loss: Option<Real>,
    pub embedding_loss: Option<Real>,
    pub generation_loss: Option<Real>,
    pub cycle_loss: Option<Real>,
    pub total: Real,
    pub lr: Real,
    pub seed: u64,
}

fn check_finite(x: Real, what: &'static str) -> Result<Real> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// One optimiser update on the batch's 2PT loss. A non-finite loss aborts
/// before any parameter changes.
pub fn twopt_step(
    bundle: &mut Bundle,
    opt: &mut Adam,
    batch: &[Prepared],
    weights: &LossWeights,
    agg: Agg,
    lr: Real,
) -> Result<BatchLossReport> {
    let mut tape = Tape::new();
    let parts = twopt_loss(&mut tape, bundle, batch, weights, agg)?;
    let val = |v: Option<Var>, what| v.map(|v| check_finite(tape.item(v), what)).transpose();
    let lm_loss = val(parts.lm, "lm loss")?;
    let embedding_loss = val(parts.embedding, "embedding loss")?;
    let generation_loss = val(parts.generation, "generation loss")?;
    let total = val(parts.total, "total loss")?.unwrap_or(0.0);
    if let Some(t) = parts.total {
        let grads = tape.backward(t)?;
        opt.step(&mut bundle.store, &grads, |_| Some(lr));
    }
    Ok(BatchLossReport {
        step: 0,
        kind: RowKind::Lm,
        lm_loss,
        embedding_loss,
        generation_loss,
        cycle_loss: None,
        total,
        lr,
        seed: 0,
    })
}

/// Mean per-word character loss of reconstructing `words` from their Tok vectors.
pub fn cycle_td_loss<S: AsRef<str>>(tape: &mut Tape, bundle: &Bundle, words: &[S]) -> Result<Var> {
    let tok = bundle.tok()?;
    let detok = bundle.detok()?;
    let v = tok.encode_batch(tape, &bundle.store, &bundle.chars, words)?;
    let l = detok.teacher_forced_loss(tape, &bundle.store, &bundle.chars, v, words)?;
    tape.mean(l)
}

/// Mean distance between `vectors` and Tok of their greedy Detok decodes.
/// Decoding happens off the tape, so only Tok receives gradients. Returns
/// `None` when every decode is empty.
pub fn cycle_dt_loss(tape: &mut Tape, bundle: &Bundle, vectors: &Tensor) -> Result<Option<Var>> {
    let tok = bundle.tok()?;
    let detok = bundle.detok()?;
    let words = detok.generate(
        &bundle.store,
        &bundle.chars,
        vectors,
        detok.config.max_len,
        GenMode::Greedy,
    )?;
    let keep: Vec<usize> = (0..words.len()).filter(|&i| !words[i].is_empty()).collect();
    if keep.len() < words.len() {
        log::debug!("dt batch: skipped {} empty decodes", words.len() - keep.len());
    }
    if keep.is_empty() {
        return Ok(None);
    }
    let kept: Vec<&str> = keep.iter().map(|&i| words[i].as_str()).collect();
    let d = vectors.cols();
    let mut tgt = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        tgt.extend_from_slice(vectors.row(i));
    }
    let v = tok.encode_batch(tape, &bundle.store, &bundle.chars, &kept)?;
    Ok(Some(embedding_loss(tape, v, Tensor::new(vec![keep.len(), d], tgt)?)?))
}

/// The `k` most frequent words (case-sensitive), ties broken alphabetically.
pub fn frequent_words(seqs: &[TokenSequence], k: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in seqs {
        for w in &s.spans {
            *counts.entry(w.word.as_str()).or_default() += 1;
        }
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().take(k).map(|(w, _)| w.to_string()).collect()
}

/// Tokenizes corpus lines, splitting long lines at word boundaries into
/// sequences of at most `max_tokens` tokens.
pub fn corpus_sequences<'a>(
    vocab: &Vocabulary,
    lines: impl IntoIterator<Item = &'a str>,
    max_tokens: usize,
) -> Vec<TokenSequence> {
    lines
        .into_iter()
        .flat_map(|l| vocab.tokenize(l).chunks(max_tokens))
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSummary {
    pub lm_steps: usize,
    pub cycle_batches: usize,
}

fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let all = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

/// The shared training loop. `cycle` is `None` for plain LM training.
fn train_loop(
    bundle: &mut Bundle,
    seqs: &[TokenSequence],
    train: &TrainConfig,
    policies: &PolicySet,
    weights: &LossWeights,
    agg: Agg,
    cycle: Option<&CycleConfig>,
    sink: &mut dyn FnMut(&BatchLossReport) -> Result<()>,
) -> Result<TrainSummary> {
    if seqs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let seed = train.seed;
    let total = total_steps(seqs.len(), train);
    let sched = WarmupLinear {
        peak: train.lr,
        total_steps: total,
        warmup_fraction: train.warmup_fraction,
    };
    let mut opt = Adam::new(train.adam);
    let mut mask_rng = rng::substream(seed, "masking");
    let mut td_rng = rng::substream(seed, "cycle.td");
    let mut dt_rng = rng::substream(seed, "cycle.dt");
    let pool = match cycle {
        Some(c) => {
            let p = frequent_words(seqs, c.pool_size);
            if p.is_empty() {
                return Err(Error::Empty("cycle word pool"));
            }
            p
        }
        None => Vec::new(),
    };
    let objective = bundle.lm.config.objective;
    let mask_fraction = bundle.lm.config.mask_fraction;
    let mut summary = TrainSummary::default();
    let mut next_td = true;
    'epochs: for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng::substream(seed, &alloc::format!("order.{epoch}")));
        for chunk in order.chunks(train.batch_size) {
            if summary.lm_steps >= total {
                break 'epochs;
            }
            let batch = chunk
                .iter()
                .map(|&i| {
                    prepare(
                        seqs[i].clone(),
                        i as u64,
                        policies,
                        &bundle.vocab,
                        objective,
                        mask_fraction,
                        &mut mask_rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = sched.lr(summary.lm_steps + 1);
            let mut rep = twopt_step(bundle, &mut opt, &batch, weights, agg, lr)?;
            summary.lm_steps += 1;
            rep.step = summary.lm_steps;
            rep.seed = seed;
            sink(&rep)?;
            if let Some(c) = cycle {
                if summary.lm_steps % c.interval == 0 {
                    let rep = if next_td {
                        let words: Vec<&str> = (0..c.batch_size)
                            .map(|_| pool[td_rng.gen_range(0..pool.len())].as_str())
                            .collect();
                        cycle_step(bundle, &mut opt, lr, RowKind::Td, |t, b| {
                            cycle_td_loss(t, b, &words).map(Some)
                        })?
                    } else {
                        let v = sphere_from(&mut dt_rng, c.batch_size, bundle.lm.config.d);
                        cycle_step(bundle, &mut opt, lr, RowKind::Dt, |t, b| cycle_dt_loss(t, b, &v))?
                    };
                    next_td = !next_td;
                    summary.cycle_batches += 1;
                    sink(&BatchLossReport {
                        step: summary.lm_steps,
                        seed,
                        ..rep
                    })?;
                }
            }
        }
    }
    Ok(summary)
}

/// One optimiser update on a td or dt cycle loss; `None` from `loss` leaves
/// the parameters untouched.
pub fn cycle_step(
    bundle: &mut Bundle,
    opt: &mut Adam,
    lr: Real,
    kind: RowKind,
    loss: impl FnOnce(&mut Tape, &Bundle) -> Result<Option<Var>>,
) -> Result<BatchLossReport> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, bundle)?;
    let value = match l {
        Some(v) => {
            let x = check_finite(tape.item(v), "cycle loss")?;
            let grads = tape.backward(v)?;
            opt.step(&mut bundle.store, &grads, |_| Some(lr));
            Some(x)
        }
        None => None,
    };
    Ok(BatchLossReport {
        step: 0,
        kind,
        lm_loss: None,
        embedding_loss: None,
        generation_loss: None,
        cycle_loss: value,
        total: value.unwrap_or(0.0),
        lr,
        seed: 0,
    })
}

/// Plain LM training (first pre-training, or the LM-only continuation).
pub fn run_lm(
    bundle: &mut Bundle,
    seqs: &[TokenSequence],
    train: &TrainConfig,
    sink: &mut dyn FnMut(&BatchLossReport) -> Result<()>,
) -> Result<TrainSummary> {
    train.validate()?;
    let weights = LossWeights {
        lm: 1.0,
        embedding: 0.0,
        generation: 0.0,
    };
    train_loop(bundle, seqs, train, &PolicySet::none(), &weights, Agg::MaxPool, None, sink)
}

/// Second pre-training. Tok and Detok must already be attached.
pub fn run_2pt(
    bundle: &mut Bundle,
    seqs: &[TokenSequence],
    cfg: &TwoPtConfig,
    sink: &mut dyn FnMut(&BatchLossReport) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    bundle.tok()?;
    bundle.detok()?;
    let s = train_loop(
        bundle,
        seqs,
        &cfg.train,
        &cfg.policies,
        &cfg.weights,
        cfg.agg,
        Some(&cfg.cycle),
        sink,
    )?;
    bundle.stage = crate::model::Stage::TokDetok;
    Ok(s)
}

/// Greedy decodes of `n` random near-unit vectors.
pub fn sample_detok_monitor(bundle: &Bundle, n: usize, seed: u64) -> Result<Vec<String>> {
    let detok = bundle.detok()?;
    let v = sample_sphere_vectors(n, bundle.lm.config.d, seed);
    detok.generate(&bundle.store, &bundle.chars, &v, detok.config.max_len, GenMode::Greedy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDistance {
    pub name: String,
    pub layer: Option<usize>,
    pub distance: Real,
}

fn layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("lm.layers.")?;
    rest.split('.').next()?.parse().ok()
}

fn group_of(name: &str) -> u8 {
    if name.starts_with("lm.layers.") {
        1
    } else if name == "lm.embedding" || name == "lm.positions" || name == "lm.start" {
        0
    } else if name.starts_with("lm.") {
        2
    } else if name.starts_with("tok.") {
        3
    } else if name.starts_with("detok.") {
        4
    } else {
        5
    }
}

/// Euclidean distance per named parameter, embeddings first, then layers in
/// index order, then the remaining parameters.
pub fn param_diff(a: &ParamStore, b: &ParamStore) -> Result<Vec<ParamDistance>> {
    if a.len() != b.len() {
        return Err(Error::ManifestMismatch(alloc::format!(
            "{} vs {} parameters",
            a.len(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(a.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::ManifestMismatch(alloc::format!(
                "parameter `{na}` {:?} vs `{nb}` {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let sq: Real = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        out.push(ParamDistance {
            name: na.to_string(),
            layer: layer_of(na),
            distance: math::sqrt(sq),
        });
    }
    out.sort_by(|x, y| {
        (group_of(&x.name), x.layer, &x.name).cmp(&(group_of(&y.name), y.layer, &y.name))
    });
    Ok(out)
}
