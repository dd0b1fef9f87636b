//! Base transformer language model: token embedding table, pre-LN
//! transformer body and a prediction head tied to the embedding table.
//!
//! Under the autoregressive objective a learned start vector is prepended and
//! `hidden[i]` is read from the row that precedes input `i`, so it only sees
//! inputs `0..i`. The row after the last input is the sequence summary.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::{self, Real};
use crate::nn::{self, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Objective {
    Masked,
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub objective: Objective,
    pub mask_fraction: Real,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` tokens.
    pub fn desk(vocab_size: usize, objective: Objective) -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_seq_len: 128,
            vocab_size,
            objective,
            mask_fraction: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("d", "must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_seq_len == 0 {
            return bad("layers", "layers, ff_dim and max_seq_len must be positive");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size", "must be positive");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return bad("mask_fraction", "must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    fn init(store: &mut ParamStore, p: &str, c: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::init(store, &format!("{p}.ln_attn"), c.d)?,
            query: Linear::init(store, &format!("{p}.attn.query"), c.d, c.d, rng)?,
            key: Linear::init(store, &format!("{p}.attn.key"), c.d, c.d, rng)?,
            value: Linear::init(store, &format!("{p}.attn.value"), c.d, c.d, rng)?,
            out: Linear::init(store, &format!("{p}.attn.out"), c.d, c.d, rng)?,
            ln_ff: LayerNorm::init(store, &format!("{p}.ln_ff"), c.d)?,
            ff_in: Linear::init(store, &format!("{p}.ff.in"), c.d, c.ff_dim, rng)?,
            ff_out: Linear::init(store, &format!("{p}.ff.out"), c.ff_dim, c.d, rng)?,
        })
    }

    fn bind(store: &ParamStore, p: &str, c: &ModelConfig) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::bind(store, &format!("{p}.ln_attn"), c.d)?,
            query: Linear::bind(store, &format!("{p}.attn.query"), c.d, c.d)?,
            key: Linear::bind(store, &format!("{p}.attn.key"), c.d, c.d)?,
            value: Linear::bind(store, &format!("{p}.attn.value"), c.d, c.d)?,
            out: Linear::bind(store, &format!("{p}.attn.out"), c.d, c.d)?,
            ln_ff: LayerNorm::bind(store, &format!("{p}.ln_ff"), c.d)?,
            ff_in: Linear::bind(store, &format!("{p}.ff.in"), c.d, c.ff_dim)?,
            ff_out: Linear::bind(store, &format!("{p}.ff.out"), c.ff_dim, c.d)?,
        })
    }
}

/// Output of the transformer body for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[l, d]`, one contextual vector per input position.
    pub hidden: Var,
    /// `[1, d]`: first position (masked) or the row after the last input
    /// (autoregressive).
    pub summary: Var,
}

#[derive(Debug, Clone)]
pub struct BaseLm {
    pub config: ModelConfig,
    pub embedding: ParamId,
    pub positions: ParamId,
    pub start: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

pub const PREFIX: &str = "lm.";

impl BaseLm {
    pub fn init(config: ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let embedding = store.add("lm.embedding", nn::normal(rng, &[c.vocab_size, c.d], 0.02))?;
        let positions = store.add("lm.positions", nn::normal(rng, &[c.max_seq_len, c.d], 0.02))?;
        let start = store.add("lm.start", nn::normal(rng, &[1, c.d], 0.02))?;
        let blocks = (0..c.layers)
            .map(|i| Block::init(store, &format!("lm.layers.{i}"), c, rng))
            .collect::<Result<_>>()?;
        let final_ln = LayerNorm::init(store, "lm.final_ln", c.d)?;
        Ok(Self {
            config,
            embedding,
            positions,
            start,
            blocks,
            final_ln,
        })
    }

    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            embedding: store.require("lm.embedding", &[c.vocab_size, c.d])?,
            positions: store.require("lm.positions", &[c.max_seq_len, c.d])?,
            start: store.require("lm.start", &[1, c.d])?,
            blocks: (0..c.layers)
                .map(|i| Block::bind(store, &format!("lm.layers.{i}"), c))
                .collect::<Result<_>>()?,
            final_ln: LayerNorm::bind(store, "lm.final_ln", c.d)?,
            config,
        })
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(n, _)| n.starts_with(PREFIX))
            .filter_map(|(n, _)| store.id(n))
            .collect()
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Raw rows of the embedding table, without positions: `[ids.len(), d]`.
    pub fn token_rows(&self, tape: &mut Tape, store: &ParamStore, ids: &[TokenId]) -> Result<Var> {
        self.check_ids(ids)?;
        let e = tape.param(store, self.embedding);
        tape.gather_rows(e, ids)
    }

    /// Adds positional embeddings `0..l` to already-assembled input rows.
    pub fn add_positions(&self, tape: &mut Tape, store: &ParamStore, rows: Var) -> Result<Var> {
        let l = tape.shape(rows)[0];
        if l > self.config.max_seq_len {
            return Err(Error::Overlength {
                len: l,
                max: self.config.max_seq_len,
            });
        }
        let p = tape.param(store, self.positions);
        let pos = tape.slice_rows(p, 0, l)?;
        tape.add(rows, pos)
    }

    /// Token embedding plus learned absolute position, one row per id.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[TokenId]) -> Result<Var> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Overlength {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        let rows = self.token_rows(tape, store, ids)?;
        self.add_positions(tape, store, rows)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: Var) -> Result<Encoded> {
        Ok(self.forward_batch(tape, store, &[inputs])?[0])
    }

    /// Runs several sequences at once. Row-wise layers see the concatenation;
    /// attention stays within each sequence.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
    ) -> Result<Vec<Encoded>> {
        let c = &self.config;
        let causal = c.objective == Objective::Autoregressive;
        let mut lens = Vec::with_capacity(inputs.len());
        let mut parts = Vec::with_capacity(inputs.len() * 2);
        for &x in inputs {
            let s = tape.shape(x).to_vec();
            if s.len() != 2 || s[1] != c.d {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: s.clone(),
                    rhs: vec![c.d],
                });
            }
            if s[0] == 0 {
                return Err(Error::Empty("input sequence"));
            }
            if s[0] > c.max_seq_len {
                return Err(Error::Overlength {
                    len: s[0],
                    max: c.max_seq_len,
                });
            }
            if causal {
                parts.push(tape.param(store, self.start));
                lens.push(s[0] + 1);
            } else {
                lens.push(s[0]);
            }
            parts.push(x);
        }
        let mut x = tape.concat(&parts, 0)?;
        let dh = c.head_dim();
        let scale = 1.0 / math::sqrt(dh as Real);
        let masks: Vec<Option<Var>> = lens
            .iter()
            .map(|&l| causal.then(|| tape.constant(causal_mask(l))))
            .collect();
        for b in &self.blocks {
            let n = b.ln_attn.forward(tape, store, x)?;
            let q = b.query.forward(tape, store, n)?;
            let k = b.key.forward(tape, store, n)?;
            let v = b.value.forward(tape, store, n)?;
            let mut seqs = Vec::with_capacity(lens.len());
            let mut off = 0;
            for (si, &l) in lens.iter().enumerate() {
                let qs = tape.slice_rows(q, off, l)?;
                let ks = tape.slice_rows(k, off, l)?;
                let vs = tape.slice_rows(v, off, l)?;
                let mut heads = Vec::with_capacity(c.heads);
                for h in 0..c.heads {
                    let qh = tape.slice_cols(qs, h * dh, dh)?;
                    let kh = tape.slice_cols(ks, h * dh, dh)?;
                    let vh = tape.slice_cols(vs, h * dh, dh)?;
                    let scores = tape.matmul_nt(qh, kh)?;
                    let mut scores = tape.scale(scores, scale);
                    if let Some(m) = masks[si] {
                        scores = tape.add(scores, m)?;
                    }
                    let att = tape.softmax(scores)?;
                    heads.push(tape.matmul(att, vh)?);
                }
                seqs.push(if heads.len() == 1 {
                    heads[0]
                } else {
                    tape.concat(&heads, 1)?
                });
                off += l;
            }
            let a = if seqs.len() == 1 {
                seqs[0]
            } else {
                tape.concat(&seqs, 0)?
            };
            let a = b.out.forward(tape, store, a)?;
            x = tape.add(x, a)?;
            let n = b.ln_ff.forward(tape, store, x)?;
            let f = b.ff_in.forward(tape, store, n)?;
            let f = tape.relu(f);
            let f = b.ff_out.forward(tape, store, f)?;
            x = tape.add(x, f)?;
        }
        let out = self.final_ln.forward(tape, store, x)?;
        let mut res = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in &lens {
            let enc = if causal {
                Encoded {
                    hidden: tape.slice_rows(out, off, l - 1)?,
                    summary: tape.slice_rows(out, off + l - 1, 1)?,
                }
            } else {
                Encoded {
                    hidden: tape.slice_rows(out, off, l)?,
                    summary: tape.slice_rows(out, off, 1)?,
                }
            };
            res.push(enc);
            off += l;
        }
        Ok(res)
    }

    /// Scores `hidden[n, d]` against every embedding row: `[n, vocab]` logits.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let e = tape.param(store, self.embedding);
        tape.matmul_nt(hidden, e)
    }

    /// Softmax distributions over the vocabulary for the selected rows.
    pub fn predict(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let h = tape.gather_rows(hidden, positions)?;
        let z = self.logits(tape, store, h)?;
        tape.softmax(z)
    }
}

/// Mean cross-entropy of `logits[n, V]` against one target per row.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[TokenId]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Empty("prediction selection"));
    }
    let t: Vec<Option<usize>> = targets.iter().map(|&x| Some(x)).collect();
    let ce = tape.cross_entropy(logits, &t)?;
    tape.mean(ce)
}

/// Positions and original ids replaced by the mask token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSelection {
    pub positions: Vec<usize>,
    pub original: Vec<TokenId>,
}

/// Picks `max(1, round(fraction * n))` of the candidate positions uniformly
/// without replacement (none when there are no candidates). Sorted.
pub fn choose_masked(candidates: &[usize], fraction: Real, rng: &mut Rng) -> Vec<usize> {
    let n = candidates.len();
    if n == 0 {
        return Vec::new();
    }
    let k = (math::round(fraction * n as Real) as usize).clamp(1, n);
    let mut picked: Vec<usize> = sample(rng, n, k).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    picked
}

fn causal_mask(l: usize) -> Tensor {
    let mut t = Tensor::zeros(&[l, l]);
    for i in 0..l {
        for j in i + 1..l {
            t.data_mut()[i * l + j] = -1e9;
        }
    }
    t
}
