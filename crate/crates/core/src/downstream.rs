//! Task fine-tuning and evaluation: setups, heads, metrics and ranking.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{Encoded, Objective};
use crate::math::Real;
use crate::model::{Bundle, Stage};
use crate::nn::{Linear, LstmCell};
use crate::optim::{Adam, AdamConfig, WarmupLinear};
use crate::params::{ParamId, ParamStore};
use crate::policy::{Policy, Role, WordSelector};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, WordSpan, SEP_TOKEN};
use crate::twopt::{assemble_input, embedding_loss, embedding_target, Agg, Alignment};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum SetupKind {
    None,
    NonePlus2pt,
    Scaffolding,
    Stochastic { p: Real, seed: u64 },
    AllNoSuff,
    AllMulti,
}

impl SetupKind {
    pub fn name(&self) -> &'static str {
        match self {
            SetupKind::None => "none",
            SetupKind::NonePlus2pt => "none_plus_2pt",
            SetupKind::Scaffolding => "scaffolding",
            SetupKind::Stochastic { .. } => "stochastic",
            SetupKind::AllNoSuff => "all_no_suff",
            SetupKind::AllMulti => "all_multi",
        }
    }

    /// The default stochastic setup samples 10% of words.
    pub fn stochastic(seed: u64) -> Self {
        SetupKind::Stochastic { p: 0.10, seed }
    }

    /// Which words are read through Tok at fine-tuning and inference time.
    pub fn inference_policy(&self) -> Policy {
        match *self {
            SetupKind::None | SetupKind::NonePlus2pt | SetupKind::Scaffolding => Policy::None,
            SetupKind::Stochastic { p, seed } => Policy::RandomFraction { p, seed },
            SetupKind::AllNoSuff => Policy::AllNoSuff,
            SetupKind::AllMulti => Policy::AllMulti,
        }
    }

    /// Checkpoint stage the setup must load.
    pub fn required_stage(&self) -> Stage {
        match self {
            SetupKind::None => Stage::Base,
            SetupKind::NonePlus2pt => Stage::LmContinued,
            _ => Stage::TokDetok,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SetupConfig {
    pub kind: SetupKind,
    pub fine_tune_body: bool,
    /// Adds the Tok embedding loss on Tok-read words during fine-tuning.
    pub embedding_loss: bool,
}

impl SetupConfig {
    pub fn new(kind: SetupKind) -> Self {
        Self {
            kind,
            fine_tune_body: true,
            embedding_loss: false,
        }
    }

    /// Rejects checkpoints from the wrong training stage.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        if let SetupKind::Stochastic { p, .. } = self.kind {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig {
                    field: "setup.p",
                    reason: "must lie in [0, 1]".into(),
                });
            }
        }
        let want = self.kind.required_stage();
        if stage != want {
            return Err(Error::InvalidConfig {
                field: "setup.kind",
                reason: format!(
                    "setup `{}` needs a `{}` checkpoint, got `{}`",
                    self.kind.name(),
                    want.name(),
                    stage.name()
                ),
            });
        }
        if matches!(self.kind, SetupKind::Scaffolding | SetupKind::NonePlus2pt) {
            log::info!(
                "setup `{}`: base embeddings only at inference, `{}` checkpoint",
                self.kind.name(),
                stage.name()
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    SequenceClassification,
    SequenceTagging,
    WordClassification,
    Ranking,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SequenceClassification => "sequence_classification",
            TaskKind::SequenceTagging => "sequence_tagging",
            TaskKind::WordClassification => "word_classification",
            TaskKind::Ranking => "ranking",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sequence_classification" => TaskKind::SequenceClassification,
            "sequence_tagging" => TaskKind::SequenceTagging,
            "word_classification" => TaskKind::WordClassification,
            "ranking" => TaskKind::Ranking,
            _ => return Err(Error::Parse(format!("unknown task kind `{s}`"))),
        })
    }

    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Ranking => "mrr",
            TaskKind::WordClassification => "accuracy",
            _ => "micro_f1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Sequence { text: String, label: usize },
    Tagging { words: Vec<String>, labels: Vec<usize> },
    Word { text: String, index: usize, label: usize },
    Ranking { query_id: String, query: String, passage: String, selected: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        for ex in self.train.iter().chain(&self.dev).chain(&self.test) {
            let ok = match (self.kind, ex) {
                (TaskKind::SequenceClassification, Example::Sequence { label, .. }) => *label < self.labels.len(),
                (TaskKind::SequenceTagging, Example::Tagging { words, labels }) => {
                    !words.is_empty()
                        && words.len() == labels.len()
                        && labels.iter().all(|&l| l < self.labels.len())
                        && words.iter().all(|w| !w.is_empty() && !w.contains(char::is_whitespace))
                }
                (TaskKind::WordClassification, Example::Word { text, index, label }) => {
                    *label < self.labels.len() && *index < text.split_whitespace().count()
                }
                (TaskKind::Ranking, Example::Ranking { .. }) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Parse(format!("malformed {} example: {ex:?}", self.kind.name())));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Ranking => 1,
            _ => self.labels.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub setup: String,
    pub task: String,
    pub partition: String,
    pub metric: String,
    pub value: Real,
    pub epoch: usize,
    pub seed: u64,
}

// ---------------------------------------------------------------- metrics

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> Real {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as Real / (tp + fp) as Real;
    let r = tp as Real / (tp + fn_) as Real;
    2.0 * p * r / (p + r)
}

/// Micro-F1 over labels; with `ignore` set (the outside label), that label is
/// neither a true nor a predicted positive. Without it this equals accuracy.
pub fn micro_f1(pred: &[usize], gold: &[usize], ignore: Option<usize>) -> Result<Real> {
    if pred.len() != gold.len() {
        return Err(Error::Shape {
            op: "micro_f1",
            lhs: vec![pred.len()],
            rhs: vec![gold.len()],
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gold) {
        let pos_p = Some(p) != ignore;
        let pos_g = Some(g) != ignore;
        if p == g {
            if pos_g {
                tp += 1;
            }
        } else {
            if pos_p {
                fp += 1;
            }
            if pos_g {
                fn_ += 1;
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Typed `(type, start, end)` spans of a BIO label sequence. A stray `I-x`
/// opens a new span.
pub fn bio_spans(labels: &[&str]) -> BTreeSet<(String, usize, usize)> {
    let mut out = BTreeSet::new();
    let mut cur: Option<(String, usize)> = None;
    for (i, l) in labels.iter().enumerate() {
        let (tag, ty) = match l.split_once('-') {
            Some((t, ty)) => (t, ty),
            None => (*l, ""),
        };
        let continues = tag == "I" && cur.as_ref().is_some_and(|(t, _)| t == ty);
        if !continues {
            if let Some((t, s)) = cur.take() {
                out.insert((t, s, i));
            }
            if tag == "B" || tag == "I" {
                cur = Some((ty.to_string(), i));
            }
        }
    }
    if let Some((t, s)) = cur {
        out.insert((t, s, labels.len()));
    }
    out
}

/// Entity-level micro-F1 over BIO spans, summed across sentences.
pub fn span_f1(pred: &[Vec<&str>], gold: &[Vec<&str>]) -> Result<Real> {
    if pred.len() != gold.len() {
        return Err(Error::Shape {
            op: "span_f1",
            lhs: vec![pred.len()],
            rhs: vec![gold.len()],
        });
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let ps = bio_spans(p);
        let gs = bio_spans(g);
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(f1_from_counts(tp, np - tp, ng - tp))
}

/// Mean of `1 / rank` over 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<Real> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Empty("ranks (1-based, non-empty)"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as Real).sum::<Real>() / ranks.len() as Real)
}

/// MRR of gold ids within ranked candidate lists.
pub fn mrr_of_lists(ranked: &[Vec<usize>], gold: &[usize]) -> Result<Real> {
    let ranks = ranked
        .iter()
        .zip(gold)
        .map(|(list, g)| {
            list.iter()
                .position(|x| x == g)
                .map(|p| p + 1)
                .ok_or(Error::OutOfRange {
                    what: "gold candidate",
                    index: *g,
                    size: list.len(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    mrr(&ranks)
}

/// Candidate indices by descending score; ties keep input order.
pub fn rank_candidates<P>(passages: &[P], mut score: impl FnMut(&P) -> Result<Real>) -> Result<Vec<usize>> {
    if passages.is_empty() {
        return Err(Error::Empty("passages"));
    }
    let scores = passages.iter().map(&mut score).collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..passages.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(core::cmp::Ordering::Equal));
    Ok(idx)
}

/// Patience-based early stopping on a higher-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<Real>,
    pub best_eval: usize,
    evals: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_eval: 0,
            evals: 0,
            bad: 0,
        }
    }

    /// Records one evaluation; returns `true` when training should stop.
    pub fn update(&mut self, metric: Real) -> bool {
        self.evals += 1;
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_eval = self.evals;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }

    pub fn improved_last(&self) -> bool {
        self.best_eval == self.evals
    }
}

// ---------------------------------------------------------------- heads

#[derive(Debug, Clone)]
pub enum Head {
    Mlp { hidden: Linear, out: Linear },
    Tagger { lstm: LstmCell, out: Linear },
    Logistic { out: Linear },
}

pub const HEAD_PREFIX: &str = "head.";

impl Head {
    pub fn init(kind: TaskKind, d: usize, outputs: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            TaskKind::SequenceClassification | TaskKind::Ranking => Head::Mlp {
                hidden: Linear::init(store, "head.mlp0", d, d, rng)?,
                out: Linear::init(store, "head.mlp1", d, outputs, rng)?,
            },
            TaskKind::SequenceTagging => Head::Tagger {
                lstm: LstmCell::init(store, "head.lstm", d, d, rng)?,
                out: Linear::init(store, "head.out", d, outputs, rng)?,
            },
            TaskKind::WordClassification => Head::Logistic {
                out: Linear::init(store, "head.logistic", d, outputs, rng)?,
            },
        })
    }

    pub fn bind(kind: TaskKind, d: usize, outputs: usize, store: &ParamStore) -> Result<Self> {
        Ok(match kind {
            TaskKind::SequenceClassification | TaskKind::Ranking => Head::Mlp {
                hidden: Linear::bind(store, "head.mlp0", d, d)?,
                out: Linear::bind(store, "head.mlp1", d, outputs)?,
            },
            TaskKind::SequenceTagging => Head::Tagger {
                lstm: LstmCell::bind(store, "head.lstm", d, d)?,
                out: Linear::bind(store, "head.out", d, outputs)?,
            },
            TaskKind::WordClassification => Head::Logistic {
                out: Linear::bind(store, "head.logistic", d, outputs)?,
            },
        })
    }

    pub fn param_count(kind: TaskKind, d: usize, outputs: usize) -> usize {
        match kind {
            TaskKind::SequenceClassification | TaskKind::Ranking => {
                Linear::param_count(d, d) + Linear::param_count(d, outputs)
            }
            TaskKind::SequenceTagging => LstmCell::param_count(d, d) + Linear::param_count(d, outputs),
            TaskKind::WordClassification => Linear::param_count(d, outputs),
        }
    }

    /// `[n, d]` vectors -> `[n, outputs]` for the MLP and logistic heads.
    pub fn score_vectors(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Head::Mlp { hidden, out } => {
                let h = hidden.forward(tape, store, x)?;
                let h = tape.relu(h);
                out.forward(tape, store, h)
            }
            Head::Logistic { out } => out.forward(tape, store, x),
            Head::Tagger { .. } => Err(Error::InvalidConfig {
                field: "head",
                reason: "tagger heads score word sequences".into(),
            }),
        }
    }

    /// Runs the tagger over each sentence's word vectors (one `[n_i, d]`
    /// matrix per sentence) and returns `[sum n_i, outputs]` in sentence order.
    pub fn tag(&self, tape: &mut Tape, store: &ParamStore, sentences: &[Var]) -> Result<Var> {
        let Head::Tagger { lstm, out } = self else {
            return Err(Error::InvalidConfig {
                field: "head",
                reason: "not a tagging head".into(),
            });
        };
        let lens: Vec<usize> = sentences.iter().map(|&s| tape.shape(s)[0]).collect();
        let d = tape.shape(sentences[0])[1];
        let b = sentences.len();
        let mut parts = sentences.to_vec();
        parts.push(tape.constant(Tensor::zeros(&[1, d])));
        let all = tape.concat(&parts, 0)?;
        let pad = lens.iter().sum::<usize>();
        let offs: Vec<usize> = lens
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(&[b, lstm.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[b, lstm.hidden]));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let idx: Vec<usize> = (0..b).map(|i| if t < lens[i] { offs[i] + t } else { pad }).collect();
            let x = tape.gather_rows(all, &idx)?;
            let (h2, c2) = lstm.step(tape, store, x, h, c)?;
            outs.push(h2);
            h = h2;
            c = c2;
        }
        let stacked = tape.concat(&outs, 0)?;
        // Row t*b + i holds sentence i at step t.
        let order: Vec<usize> = (0..b).flat_map(|i| (0..lens[i]).map(move |t| t * b + i)).collect();
        let rows = tape.gather_rows(stacked, &order)?;
        out.forward(tape, store, rows)
    }
}

// ---------------------------------------------------------------- task model

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub body_lr: Real,
    pub head_lr: Real,
    pub warmup_fraction: Real,
    pub patience: usize,
    /// Span-level BIO scoring for tagging instead of token-level.
    pub bio_spans: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            body_lr: 2e-5,
            head_lr: 1e-3,
            warmup_fraction: 0.1,
            patience: 4,
            bio_spans: false,
            seed: 0,
        }
    }
}

/// A bundle plus a task head living in the same parameter store.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub bundle: Bundle,
    pub setup: SetupConfig,
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub head: Head,
}

/// One example turned into a token sequence with its Tok selection.
#[derive(Debug, Clone)]
struct Input {
    seq: TokenSequence,
    usage: Vec<usize>,
}

impl TaskModel {
    pub fn new(mut bundle: Bundle, setup: SetupConfig, task: &TaskSpec, seed: u64) -> Result<Self> {
        setup.validate(bundle.stage)?;
        if setup.kind.inference_policy() != Policy::None {
            bundle.tok()?;
        }
        let d = bundle.lm.config.d;
        let head = Head::init(
            task.kind,
            d,
            task.output_dim(),
            &mut bundle.store,
            &mut rng::substream(seed, "init.head"),
        )?;
        Ok(Self {
            bundle,
            setup,
            kind: task.kind,
            labels: task.labels.clone(),
            head,
        })
    }

    /// Rebinds a saved task model whose store already holds `head.*`.
    pub fn from_parts(bundle: Bundle, setup: SetupConfig, kind: TaskKind, labels: Vec<String>) -> Result<Self> {
        let outputs = if kind == TaskKind::Ranking { 1 } else { labels.len() };
        let head = Head::bind(kind, bundle.lm.config.d, outputs, &bundle.store)?;
        Ok(Self {
            bundle,
            setup,
            kind,
            labels,
            head,
        })
    }

    fn max_len(&self) -> usize {
        self.bundle.lm.config.max_seq_len
    }

    fn fit(&self, seq: TokenSequence) -> TokenSequence {
        if seq.len() <= self.max_len() {
            return seq;
        }
        log::warn!("sequence of {} tokens truncated to {}", seq.len(), self.max_len());
        seq.chunks(self.max_len()).into_iter().next().unwrap_or_default()
    }

    fn select(&self, seq: &TokenSequence, key: u64, skip: Option<usize>) -> Vec<usize> {
        let mut u = self
            .setup
            .kind
            .inference_policy()
            .select(Role::Usage, seq, &self.bundle.vocab, key);
        if let Some(s) = skip {
            u.retain(|&w| w != s);
        }
        u
    }

    fn input_for(&self, ex: &Example, key: u64) -> Result<Input> {
        let vocab = &self.bundle.vocab;
        match ex {
            Example::Sequence { text, .. } | Example::Word { text, .. } => {
                let seq = self.fit(vocab.tokenize(text));
                if seq.is_empty() {
                    return Err(Error::Empty("example text"));
                }
                let usage = self.select(&seq, key, None);
                Ok(Input { seq, usage })
            }
            Example::Tagging { words, .. } => {
                let seq = self.fit(vocab.tokenize(&words.join(" ")));
                let usage = self.select(&seq, key, None);
                Ok(Input { seq, usage })
            }
            Example::Ranking { query, passage, .. } => {
                let (seq, sep_word) = self.pair_sequence(query, passage)?;
                let usage = self.select(&seq, key, Some(sep_word));
                Ok(Input { seq, usage })
            }
        }
    }

    /// `query [SEP] passage`, cutting passage words to fit.
    fn pair_sequence(&self, query: &str, passage: &str) -> Result<(TokenSequence, usize)> {
        let vocab = &self.bundle.vocab;
        let sep = vocab.sep_id().ok_or(Error::MissingParam("[SEP] token".into()))?;
        let mut seq = vocab.tokenize(query);
        let budget = self.max_len().saturating_sub(2);
        if seq.len() > budget / 2 {
            seq = seq.chunks((budget / 2).max(1)).into_iter().next().unwrap_or_default();
        }
        let sep_word = seq.word_count();
        let start = seq.ids.len();
        seq.ids.push(sep);
        seq.spans.push(WordSpan {
            start,
            end: start + 1,
            word: SEP_TOKEN.to_string(),
        });
        let p = vocab.tokenize(passage);
        let room = self.max_len() - seq.len();
        let mut taken = 0;
        for s in &p.spans {
            if seq.len() + s.len() > self.max_len() {
                log::warn!("passage truncated after {taken} words to fit {} tokens", room);
                break;
            }
            let start = seq.ids.len();
            seq.ids.extend_from_slice(&p.ids[s.start..s.end]);
            seq.spans.push(WordSpan {
                start,
                end: seq.ids.len(),
                word: s.word.clone(),
            });
            taken += 1;
        }
        Ok((seq, sep_word))
    }

    fn encode(&self, tape: &mut Tape, inputs: &[Input]) -> Result<(Vec<Encoded>, Vec<Alignment>, Option<Var>)> {
        let store = &self.bundle.store;
        let words: Vec<&str> = inputs
            .iter()
            .flat_map(|i| i.usage.iter().map(move |&w| i.seq.spans[w].word.as_str()))
            .collect();
        let tok_all = if words.is_empty() {
            None
        } else {
            Some(self.bundle.tok()?.encode_batch(tape, store, &self.bundle.chars, &words)?)
        };
        let mut xs = Vec::with_capacity(inputs.len());
        let mut aligns = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for inp in inputs {
            let rows = match tok_all {
                Some(all) if !inp.usage.is_empty() => {
                    let idx: Vec<usize> = (off..off + inp.usage.len()).collect();
                    Some(tape.gather_rows(all, &idx)?)
                }
                _ => None,
            };
            off += inp.usage.len();
            let (x, a) = assemble_input(tape, store, &self.bundle.lm, &inp.seq, &inp.seq.ids, &inp.usage, rows)?;
            xs.push(x);
            aligns.push(a);
        }
        let encs = self.bundle.lm.forward_batch(tape, store, &xs)?;
        Ok((encs, aligns, tok_all))
    }

    /// Head outputs for a batch: `[B, outputs]` for sequence-level tasks and
    /// word classification, `[sum words, labels]` for tagging.
    fn outputs(&self, tape: &mut Tape, examples: &[&Example], inputs: &[Input]) -> Result<Var> {
        let (encs, aligns, _) = self.encode(tape, inputs)?;
        self.head_outputs(tape, examples, inputs, &encs, &aligns)
    }

    fn head_outputs(
        &self,
        tape: &mut Tape,
        examples: &[&Example],
        inputs: &[Input],
        encs: &[Encoded],
        aligns: &[Alignment],
    ) -> Result<Var> {
        let store = &self.bundle.store;
        match self.kind {
            TaskKind::SequenceClassification | TaskKind::Ranking => {
                let reps: Vec<Var> = encs.iter().map(|e| e.summary).collect();
                let x = tape.concat(&reps, 0)?;
                self.head.score_vectors(tape, store, x)
            }
            TaskKind::WordClassification => {
                let mut reps = Vec::with_capacity(encs.len());
                for ((ex, e), a) in examples.iter().zip(encs).zip(aligns) {
                    let Example::Word { index, .. } = ex else {
                        return Err(Error::Parse("expected a word-classification example".into()));
                    };
                    let pos = word_representative(a, *index)?;
                    reps.push(tape.slice_rows(e.hidden, pos, 1)?);
                }
                let x = tape.concat(&reps, 0)?;
                self.head.score_vectors(tape, store, x)
            }
            TaskKind::SequenceTagging => {
                let mut sents = Vec::with_capacity(encs.len());
                for ((inp, e), a) in inputs.iter().zip(encs).zip(aligns) {
                    let rows: Vec<usize> = (0..inp.seq.word_count()).map(|w| a.word_pos[w]).collect();
                    sents.push(tape.gather_rows(e.hidden, &rows)?);
                }
                self.head.tag(tape, store, &sents)
            }
        }
    }

    fn batch_loss(&self, tape: &mut Tape, examples: &[&Example], inputs: &[Input]) -> Result<Var> {
        let (encs, aligns, tok_all) = self.encode(tape, inputs)?;
        let out = self.head_outputs(tape, examples, inputs, &encs, &aligns)?;
        let mut loss = match self.kind {
            TaskKind::SequenceClassification | TaskKind::WordClassification => {
                let t: Vec<Option<usize>> = examples
                    .iter()
                    .map(|ex| match ex {
                        Example::Sequence { label, .. } | Example::Word { label, .. } => Some(*label),
                        _ => None,
                    })
                    .collect();
                let ce = tape.cross_entropy(out, &t)?;
                tape.mean(ce)?
            }
            TaskKind::SequenceTagging => {
                let mut t = Vec::new();
                for (ex, inp) in examples.iter().zip(inputs) {
                    if let Example::Tagging { labels, .. } = ex {
                        t.extend(labels.iter().take(inp.seq.word_count()).map(|&l| Some(l)));
                    }
                }
                let ce = tape.cross_entropy(out, &t)?;
                tape.mean(ce)?
            }
            TaskKind::Ranking => {
                let t: Vec<Option<usize>> = examples
                    .iter()
                    .map(|ex| match ex {
                        Example::Ranking { selected, .. } => Some(*selected as usize),
                        _ => None,
                    })
                    .collect();
                let n = t.len();
                let zeros = tape.constant(Tensor::zeros(&[n, 1]));
                let logits = tape.concat(&[zeros, out], 1)?;
                let ce = tape.cross_entropy(logits, &t)?;
                tape.mean(ce)?
            }
        };
        if self.setup.embedding_loss {
            if let Some(all) = tok_all {
                let table = self.bundle.store.get(self.bundle.lm.embedding);
                let mut tgt = Vec::new();
                for inp in inputs {
                    for &w in &inp.usage {
                        tgt.extend(embedding_target(table, inp.seq.word_ids(w), Agg::MaxPool)?);
                    }
                }
                let n = tape.shape(all)[0];
                let e = embedding_loss(tape, all, Tensor::new(vec![n, self.bundle.lm.config.d], tgt)?)?;
                loss = tape.add(loss, e)?;
            }
        }
        Ok(loss)
    }

    /// Predicted label ids: one per example, or one per word for tagging.
    pub fn predict(&self, examples: &[Example], batch_size: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(examples.len());
        for (bi, chunk) in examples.chunks(batch_size.max(1)).enumerate() {
            let inputs = chunk
                .iter()
                .enumerate()
                .map(|(j, ex)| self.input_for(ex, (bi * batch_size.max(1) + j) as u64))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut tape = Tape::new();
            let o = self.outputs(&mut tape, &refs, &inputs)?;
            let v = tape.value(o);
            let mut row = 0;
            for (ex, inp) in chunk.iter().zip(&inputs) {
                let n = if self.kind == TaskKind::SequenceTagging { inp.seq.word_count() } else { 1 };
                let mut labels: Vec<usize> = (row..row + n).map(|r| argmax(v.row(r))).collect();
                row += n;
                if let Example::Tagging { words, .. } = ex {
                    let fill = self.outside_label();
                    labels.resize(words.len(), fill);
                }
                out.push(labels);
            }
        }
        Ok(out)
    }

    /// Ranking scores, one per example.
    pub fn scores(&self, examples: &[Example], batch_size: usize) -> Result<Vec<Real>> {
        let mut out = Vec::with_capacity(examples.len());
        for (bi, chunk) in examples.chunks(batch_size.max(1)).enumerate() {
            let inputs = chunk
                .iter()
                .enumerate()
                .map(|(j, ex)| self.input_for(ex, (bi * batch_size.max(1) + j) as u64))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut tape = Tape::new();
            let o = self.outputs(&mut tape, &refs, &inputs)?;
            out.extend_from_slice(tape.value(o).data());
        }
        Ok(out)
    }

    /// Ranks each passage against the query by the ranking head's score.
    pub fn rank(&self, query: &str, passages: &[&str]) -> Result<Vec<usize>> {
        rank_candidates(passages, |p| {
            let ex = Example::Ranking {
                query_id: String::new(),
                query: query.to_string(),
                passage: p.to_string(),
                selected: false,
            };
            Ok(self.scores(core::slice::from_ref(&ex), 1)?[0])
        })
    }

    fn outside_label(&self) -> usize {
        self.labels.iter().position(|l| l == "O").unwrap_or(0)
    }

    /// The task metric on a partition.
    pub fn evaluate(&self, examples: &[Example], cfg: &FinetuneConfig) -> Result<Real> {
        if examples.is_empty() {
            return Err(Error::Empty("evaluation data"));
        }
        match self.kind {
            TaskKind::Ranking => {
                let scores = self.scores(examples, cfg.batch_size)?;
                let mut groups: BTreeMap<&str, (Vec<(usize, Real)>, Option<usize>)> = BTreeMap::new();
                for (i, (ex, s)) in examples.iter().zip(&scores).enumerate() {
                    if let Example::Ranking { query_id, selected, .. } = ex {
                        let g = groups.entry(query_id.as_str()).or_default();
                        if *selected {
                            g.1 = Some(i);
                        }
                        g.0.push((i, *s));
                    }
                }
                let mut ranked = Vec::new();
                let mut gold = Vec::new();
                for (_, (cands, sel)) in groups {
                    let Some(sel) = sel else { continue };
                    let order = rank_candidates(&cands, |c| Ok(c.1))?;
                    ranked.push(order.iter().map(|&k| cands[k].0).collect());
                    gold.push(sel);
                }
                mrr_of_lists(&ranked, &gold)
            }
            TaskKind::SequenceTagging => {
                let pred = self.predict(examples, cfg.batch_size)?;
                let gold: Vec<Vec<usize>> = examples
                    .iter()
                    .map(|ex| match ex {
                        Example::Tagging { labels, .. } => labels.clone(),
                        _ => Vec::new(),
                    })
                    .collect();
                if cfg.bio_spans {
                    let name = |v: &Vec<usize>| -> Vec<&str> { v.iter().map(|&l| self.labels[l].as_str()).collect() };
                    let p: Vec<Vec<&str>> = pred.iter().map(name).collect();
                    let g: Vec<Vec<&str>> = gold.iter().map(name).collect();
                    span_f1(&p, &g)
                } else {
                    let p: Vec<usize> = pred.into_iter().flatten().collect();
                    let g: Vec<usize> = gold.into_iter().flatten().collect();
                    micro_f1(&p, &g, Some(self.outside_label()))
                }
            }
            _ => {
                let pred: Vec<usize> = self.predict(examples, cfg.batch_size)?.into_iter().flatten().collect();
                let gold: Vec<usize> = examples
                    .iter()
                    .map(|ex| match ex {
                        Example::Sequence { label, .. } | Example::Word { label, .. } => *label,
                        _ => 0,
                    })
                    .collect();
                micro_f1(&pred, &gold, None)
            }
        }
    }

    pub fn body_ids(&self) -> Vec<ParamId> {
        let store = &self.bundle.store;
        store
            .iter()
            .filter(|(n, _)| !n.starts_with(HEAD_PREFIX))
            .filter_map(|(n, _)| store.id(n))
            .collect()
    }

    pub fn is_head(&self, id: ParamId) -> bool {
        self.bundle.store.name(id).starts_with(HEAD_PREFIX)
    }
}

/// Input position representing a word: its Tok slot if it was Tok-read,
/// otherwise its first token.
pub fn word_representative(align: &Alignment, word: usize) -> Result<usize> {
    align.word_pos.get(word).copied().ok_or(Error::OutOfRange {
        what: "word index",
        index: word,
        size: align.word_pos.len(),
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: TaskModel,
    pub dev: Vec<EvalResult>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Fine-tunes `model` on `task.train`, evaluating on `task.dev` after every
/// epoch and keeping the best parameters.
pub fn finetune(mut model: TaskModel, task: &TaskSpec, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    task.validate()?;
    if task.train.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig {
            field: "epochs",
            reason: "epochs and batch_size must be positive".into(),
        });
    }
    let per_epoch = task.train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let sched = |peak| WarmupLinear {
        peak,
        total_steps: total,
        warmup_fraction: cfg.warmup_fraction,
    };
    let (body_s, head_s) = (sched(cfg.body_lr), sched(cfg.head_lr));
    let mut opt = Adam::new(AdamConfig::default());
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best_store = model.bundle.store.clone();
    let mut dev = Vec::new();
    let mut step = 0;
    let mut epochs_run = 0;
    let is_head: Vec<bool> = {
        let s = &model.bundle.store;
        let n = s.ids().map(|i| i.index()).max().map_or(0, |m| m + 1);
        let mut v = vec![false; n];
        for id in s.ids() {
            v[id.index()] = s.name(id).starts_with(HEAD_PREFIX);
        }
        v
    };
    let dev_part: &[Example] = if task.dev.is_empty() { &task.train } else { &task.dev };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, &format!("finetune.order.{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let refs: Vec<&Example> = chunk.iter().map(|&i| &task.train[i]).collect();
            let inputs = chunk
                .iter()
                .map(|&i| model.input_for(&task.train[i], ((epoch as u64) << 32) | i as u64))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, &refs, &inputs)?;
            if !tape.item(loss).is_finite() {
                return Err(Error::NonFinite("fine-tuning loss"));
            }
            let grads = tape.backward(loss)?;
            let (blr, hlr) = (body_s.lr(step), head_s.lr(step));
            let tune_body = model.setup.fine_tune_body;
            opt.step(&mut model.bundle.store, &grads, |id| {
                if is_head[id.index()] {
                    Some(hlr)
                } else if tune_body {
                    Some(blr)
                } else {
                    None
                }
            });
        }
        epochs_run += 1;
        let value = model.evaluate(dev_part, cfg)?;
        dev.push(EvalResult {
            setup: model.setup.kind.name().into(),
            task: model.kind.name().into(),
            partition: "dev".into(),
            metric: model.kind.metric().into(),
            value,
            epoch: epoch + 1,
            seed: cfg.seed,
        });
        let halt = stop.update(value);
        if stop.improved_last() {
            best_store = model.bundle.store.clone();
        }
        if halt {
            break;
        }
    }
    model.bundle.store = best_store;
    Ok(FinetuneOutcome {
        model,
        dev,
        best_epoch: stop.best_eval,
        epochs_run,
    })
}

fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sequence representative used by sequence-level heads.
pub fn sequence_position(objective: Objective, len: usize) -> usize {
    match objective {
        Objective::Masked => 0,
        Objective::Autoregressive => len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detok::DetokConfig;
    use crate::gradcheck::check_params;
    use crate::lm::ModelConfig;
    use crate::tok::TokConfig;
    use crate::tokenizer::{train_bpe, Scheme};
    use proptest::prelude::*;

    const CORPUS: [&str; 4] = [
        "the cat sat on the mat",
        "a dog ran to the cats",
        "the dogs sat on a mat",
        "cats and dogs ran",
    ];

    fn bundle(objective: Objective, stage: Stage) -> Bundle {
        let vocab = train_bpe(CORPUS, 40, Scheme::ContinuationMark).unwrap();
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            max_seq_len: 16,
            vocab_size: vocab.len(),
            objective,
            mask_fraction: 0.3,
        };
        let mut b = Bundle::new_base(vocab, cfg, 3).unwrap();
        if stage == Stage::TokDetok {
            b.attach_tokdetok(
                TokConfig { char_dim: 3, channels: 4, max_word_len: 16 },
                DetokConfig { hidden: 4, layers: 1, max_len: 8 },
                3,
            )
            .unwrap();
        }
        b.stage = stage;
        b
    }

    fn seq_task() -> TaskSpec {
        let ex = |t: &str, l| Example::Sequence { text: t.into(), label: l };
        TaskSpec {
            kind: TaskKind::SequenceClassification,
            labels: vec!["a".into(), "b".into()],
            train: vec![ex("the cat sat", 0), ex("dogs ran", 1), ex("a cat sat on the mat", 0), ex("the dogs ran", 1)],
            dev: vec![ex("the cat sat", 0), ex("dogs ran", 1)],
            test: vec![],
        }
    }

    fn tag_task() -> TaskSpec {
        let ex = |w: &[&str], l: &[usize]| Example::Tagging {
            words: w.iter().map(|s| s.to_string()).collect(),
            labels: l.to_vec(),
        };
        TaskSpec {
            kind: TaskKind::SequenceTagging,
            labels: vec!["O".into(), "B-ANI".into(), "I-ANI".into()],
            train: vec![ex(&["the", "cat", "sat"], &[0, 1, 0]), ex(&["dogs", "ran"], &[1, 0])],
            dev: vec![ex(&["a", "dog", "ran"], &[0, 1, 0])],
            test: vec![],
        }
    }

    fn word_task() -> TaskSpec {
        let ex = |t: &str, i, l| Example::Word { text: t.into(), index: i, label: l };
        TaskSpec {
            kind: TaskKind::WordClassification,
            labels: vec!["short".into(), "long".into()],
            train: vec![ex("the cats sat", 1, 1), ex("a dog ran", 1, 0), ex("the dogs ran", 1, 1)],
            dev: vec![ex("the cat sat", 1, 0)],
            test: vec![],
        }
    }

    fn rank_task() -> TaskSpec {
        let ex = |q: &str, p: &str, s| Example::Ranking {
            query_id: q.into(),
            query: q.into(),
            passage: p.into(),
            selected: s,
        };
        TaskSpec {
            kind: TaskKind::Ranking,
            labels: vec![],
            train: vec![ex("cat", "the cat sat", true), ex("cat", "dogs ran", false)],
            dev: vec![ex("dog", "a dog ran", true), ex("dog", "the mat", false), ex("dog", "cats and dogs", false)],
            test: vec![],
        }
    }

    #[test]
    fn f1_from_counts_two_thirds() {
        assert!((f1_from_counts(2, 1, 1) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_from_counts(0, 3, 3), 0.0);
        // O = 0: gold [1,1,2,0], pred [1,1,0,2] -> tp 2, fp 1, fn 1
        let f = micro_f1(&[1, 1, 0, 2], &[1, 1, 2, 0], Some(0)).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn micro_f1_without_ignore_is_accuracy() {
        let f = micro_f1(&[0, 1, 2, 2], &[0, 1, 1, 2], None).unwrap();
        assert!((f - 0.75).abs() < 1e-12);
        assert!(micro_f1(&[0], &[0, 1], None).is_err());
    }

    #[test]
    fn mrr_of_ranks() {
        assert!((mrr(&[2, 1, 4]).unwrap() - 0.583_333_333_333_333_3).abs() < 1e-12);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0]).is_err());
        let r = mrr_of_lists(&[vec![3, 1, 2], vec![0, 1]], &[1, 0]).unwrap();
        assert!((r - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rank_candidates_is_stable_on_ties() {
        let s = [0.5, 0.9, 0.5, 0.9, 0.1];
        let order = rank_candidates(&s, |&x| Ok(x)).unwrap();
        assert_eq!(order, vec![1, 3, 0, 2, 4]);
        assert!(rank_candidates::<Real>(&[], |&x| Ok(x)).is_err());
    }

    #[test]
    fn bio_span_scoring() {
        let g = bio_spans(&["B-PER", "I-PER", "O", "B-LOC"]);
        assert_eq!(g.len(), 2);
        assert!(g.contains(&("PER".into(), 0, 2)));
        let stray = bio_spans(&["O", "I-LOC", "I-LOC"]);
        assert!(stray.contains(&("LOC".into(), 1, 3)));
        let f = span_f1(&[vec!["B-PER", "O", "O", "B-LOC"]], &[vec!["B-PER", "I-PER", "O", "B-LOC"]]).unwrap();
        // pred spans {PER 0..1, LOC 3..4}, gold {PER 0..2, LOC 3..4}
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(4);
        let metrics = [0.5, 0.6, 0.6, 0.55, 0.58, 0.59, 0.7];
        let mut stopped_at = None;
        for (i, m) in metrics.iter().enumerate() {
            if s.update(*m) {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_eval, 2);
        assert_eq!(s.best, Some(0.6));
    }

    #[test]
    fn setup_stage_requirements() {
        assert!(SetupConfig::new(SetupKind::None).validate(Stage::Base).is_ok());
        assert!(SetupConfig::new(SetupKind::None).validate(Stage::TokDetok).is_err());
        assert!(SetupConfig::new(SetupKind::NonePlus2pt).validate(Stage::LmContinued).is_ok());
        assert!(SetupConfig::new(SetupKind::Scaffolding).validate(Stage::Base).is_err());
        assert!(SetupConfig::new(SetupKind::stochastic(1)).validate(Stage::TokDetok).is_ok());
        let bad = SetupKind::Stochastic { p: 1.5, seed: 0 };
        assert!(SetupConfig::new(bad).validate(Stage::TokDetok).is_err());
        assert_eq!(SetupKind::Scaffolding.inference_policy(), Policy::None);
        assert_eq!(SetupKind::AllMulti.inference_policy(), Policy::AllMulti);
    }

    #[test]
    fn head_shapes_match_analytic_counts() {
        for (task, out) in [
            (TaskKind::SequenceClassification, 5),
            (TaskKind::SequenceTagging, 3),
            (TaskKind::WordClassification, 4),
            (TaskKind::Ranking, 1),
        ] {
            let mut store = ParamStore::new();
            Head::init(task, 8, out, &mut store, &mut rng::substream(0, "h")).unwrap();
            let n: usize = store.iter().map(|(_, t)| t.numel()).sum();
            let want = match task {
                TaskKind::SequenceClassification | TaskKind::Ranking => 8 * 8 + 8 + 8 * out + out,
                TaskKind::SequenceTagging => 4 * 8 * (8 + 8) + 4 * 8 + 8 * out + out,
                TaskKind::WordClassification => 8 * out + out,
            };
            assert_eq!(n, want, "{task:?}");
            assert_eq!(Head::param_count(task, 8, out), want);
        }
    }

    #[test]
    fn tagger_batch_matches_single_sentences() {
        let mut store = ParamStore::new();
        let head = Head::init(TaskKind::SequenceTagging, 4, 3, &mut store, &mut rng::substream(1, "h")).unwrap();
        let a = crate::nn::normal(&mut rng::substream(2, "a"), &[3, 4], 1.0);
        let b = crate::nn::normal(&mut rng::substream(3, "b"), &[1, 4], 1.0);
        let mut t = Tape::new();
        let va = t.constant(a.clone());
        let vb = t.constant(b.clone());
        let both = head.tag(&mut t, &store, &[va, vb]).unwrap();
        let ya = head.tag(&mut t, &store, &[va]).unwrap();
        let yb = head.tag(&mut t, &store, &[vb]).unwrap();
        let both = t.value(both).data().to_vec();
        let mut single = t.value(ya).data().to_vec();
        single.extend_from_slice(t.value(yb).data());
        assert_eq!(both, single);
    }

    #[test]
    fn ranking_pairs_insert_sep_outside_usage() {
        let b = bundle(Objective::Masked, Stage::TokDetok);
        let m = TaskModel::new(b, SetupConfig::new(SetupKind::AllMulti), &rank_task(), 0).unwrap();
        let ex = Example::Ranking {
            query_id: "q".into(),
            query: "cats".into(),
            passage: "the cats sat on the mat".into(),
            selected: true,
        };
        let inp = m.input_for(&ex, 0).unwrap();
        let sep = inp.seq.spans.iter().position(|s| s.word == SEP_TOKEN).unwrap();
        assert_eq!(inp.seq.ids[inp.seq.spans[sep].start], m.bundle.vocab.sep_id().unwrap());
        assert!(!inp.usage.contains(&sep));
        assert!(inp.seq.len() <= m.max_len());
    }

    #[test]
    fn long_passages_are_truncated_to_fit() {
        let b = bundle(Objective::Autoregressive, Stage::Base);
        let m = TaskModel::new(b, SetupConfig::new(SetupKind::None), &rank_task(), 0).unwrap();
        let long = ["the cats sat on the mat"; 10].join(" ");
        let (seq, sep) = m.pair_sequence("cats and dogs", &long).unwrap();
        assert!(seq.len() <= m.max_len());
        assert_eq!(seq.spans[sep].word, SEP_TOKEN);
        assert!(seq.word_count() > sep + 1);
    }

    fn grad_check(task: TaskSpec, kind: SetupKind, stage: Stage, objective: Objective) {
        let b = bundle(objective, stage);
        let mut m = TaskModel::new(b, SetupConfig::new(kind.clone()), &task, 4).unwrap();
        let exs: Vec<&Example> = task.train.iter().collect();
        let inputs: Vec<Input> = task.train.iter().map(|e| m.input_for(e, 0).unwrap()).collect();
        let ids: Vec<ParamId> = m.bundle.store.ids().collect();
        let shadow = m.clone();
        let r = check_params(
            &mut m.bundle.store,
            &ids,
            |t, s| {
                let mut view = shadow.clone();
                view.bundle.store = s.clone();
                view.batch_loss(t, &exs, &inputs)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{:?} {}: {r:?}", task.kind, kind.name());
    }

    #[test]
    fn gradcheck_all_heads() {
        grad_check(seq_task(), SetupKind::None, Stage::Base, Objective::Masked);
        grad_check(tag_task(), SetupKind::AllMulti, Stage::TokDetok, Objective::Masked);
        grad_check(word_task(), SetupKind::AllNoSuff, Stage::TokDetok, Objective::Autoregressive);
        grad_check(rank_task(), SetupKind::None, Stage::Base, Objective::Autoregressive);
    }

    #[test]
    fn frozen_body_is_bit_identical() {
        let b = bundle(Objective::Masked, Stage::Base);
        let before = b.store.clone();
        let mut setup = SetupConfig::new(SetupKind::None);
        setup.fine_tune_body = false;
        let task = seq_task();
        let m = TaskModel::new(b, setup, &task, 0).unwrap();
        let cfg = FinetuneConfig { epochs: 3, batch_size: 2, patience: 10, ..Default::default() };
        let out = finetune(m, &task, &cfg).unwrap();
        for (name, t) in before.iter() {
            let id = out.model.bundle.store.id(name).unwrap();
            assert_eq!(out.model.bundle.store.get(id), t, "{name}");
        }
        let h = out.model.bundle.store.id("head.mlp1.weight").unwrap();
        let fresh = TaskModel::new(bundle(Objective::Masked, Stage::Base), SetupConfig::new(SetupKind::None), &task, 0)
            .unwrap();
        assert_ne!(out.model.bundle.store.get(h), fresh.bundle.store.get(h));
    }

    #[test]
    fn finetune_runs_every_task_and_is_deterministic() {
        for (task, kind, stage) in [
            (seq_task(), SetupKind::Scaffolding, Stage::TokDetok),
            (tag_task(), SetupKind::stochastic(2), Stage::TokDetok),
            (word_task(), SetupKind::AllMulti, Stage::TokDetok),
            (rank_task(), SetupKind::NonePlus2pt, Stage::LmContinued),
        ] {
            let cfg = FinetuneConfig { epochs: 2, batch_size: 2, ..Default::default() };
            let run = || {
                let m = TaskModel::new(bundle(Objective::Masked, stage), SetupConfig::new(kind.clone()), &task, 1)
                    .unwrap();
                finetune(m, &task, &cfg).unwrap()
            };
            let a = run();
            let b = run();
            assert_eq!(a.dev, b.dev);
            assert_eq!(a.epochs_run, 2);
            assert_eq!(a.dev[0].metric, task.kind.metric());
            assert!((0.0..=1.0).contains(&a.dev[0].value));
            let pa: Vec<Real> = a.model.bundle.store.flat("");
            let pb: Vec<Real> = b.model.bundle.store.flat("");
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn malformed_examples_are_rejected() {
        let mut t = tag_task();
        t.train.push(Example::Tagging { words: vec!["a".into()], labels: vec![0, 1] });
        assert!(t.validate().is_err());
        let mut w = word_task();
        w.train.push(Example::Word { text: "a cat".into(), index: 2, label: 0 });
        assert!(w.validate().is_err());
    }

    fn brute_micro_f1(pred: &[usize], gold: &[usize], labels: usize, ignore: Option<usize>) -> Real {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for l in 0..labels {
            if Some(l) == ignore {
                continue;
            }
            for (&p, &g) in pred.iter().zip(gold) {
                match (p == l, g == l) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
        }
        if tp + fp + fn_ == 0.0 {
            return 1.0;
        }
        if tp == 0.0 {
            return 0.0;
        }
        2.0 * tp / (2.0 * tp + fp + fn_)
    }

    proptest! {
        #[test]
        fn micro_f1_matches_per_label_counts(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
            ignore in proptest::option::of(0usize..4),
        ) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let f = micro_f1(&p, &g, ignore).unwrap();
            prop_assert!((f - brute_micro_f1(&p, &g, 4, ignore)).abs() < 1e-12);
        }
    }
}
