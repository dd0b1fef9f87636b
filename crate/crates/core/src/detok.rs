//! Character-level word decoder: a two-layer LSTM whose initial states are
//! projected from a context vector, fed `<w>` then the previous character,
//! with a linear-tanh-linear head over the character alphabet.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::Real;
use crate::nn::{Linear, LstmCell};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tok::{CharVocabulary, BOW, EOW, PAD};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DetokConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Generation cap in characters, `/w` excluded.
    pub max_len: usize,
}

impl Default for DetokConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            max_len: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Greedy,
    /// Temperature-1 categorical sampling from the seeded generator.
    Sample(u64),
}

#[derive(Debug, Clone)]
struct LayerInit {
    h: Linear,
    c: Linear,
}

#[derive(Debug, Clone)]
pub struct Detok {
    pub config: DetokConfig,
    pub d: usize,
    pub sigma: usize,
    /// Shared with the encoder; not part of the `detok.` parameters.
    pub chars: ParamId,
    char_dim: usize,
    init: Vec<LayerInit>,
    cells: Vec<LstmCell>,
    head: [Linear; 2],
}

/// Per-layer `(h, c)` pairs, each `[B, hidden]`.
pub type State = Vec<(Var, Var)>;

pub const PREFIX: &str = "detok.";

impl Detok {
    pub fn init(
        config: DetokConfig,
        d: usize,
        chars: ParamId,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.hidden == 0 || config.layers == 0 || config.max_len == 0 {
            return Err(Error::InvalidConfig {
                field: "detok",
                reason: "hidden, layers and max_len must be positive".into(),
            });
        }
        let shape = store.get(chars).shape().to_vec();
        let (sigma, char_dim) = (shape[0], shape[1]);
        let hd = config.hidden;
        let mut init = Vec::new();
        let mut cells = Vec::new();
        for l in 0..config.layers {
            init.push(LayerInit {
                h: Linear::init(store, &format!("detok.init{l}.h"), d, hd, rng)?,
                c: Linear::init(store, &format!("detok.init{l}.c"), d, hd, rng)?,
            });
            let input = if l == 0 { char_dim } else { hd };
            cells.push(LstmCell::init(store, &format!("detok.lstm{l}"), input, hd, rng)?);
        }
        let head = [
            Linear::init(store, "detok.head0", hd, hd, rng)?,
            Linear::init(store, "detok.head1", hd, sigma, rng)?,
        ];
        Ok(Self {
            config,
            d,
            sigma,
            chars,
            char_dim,
            init,
            cells,
            head,
        })
    }

    pub fn bind(config: DetokConfig, d: usize, chars: ParamId, store: &ParamStore) -> Result<Self> {
        let shape = store.get(chars).shape().to_vec();
        let (sigma, char_dim) = (shape[0], shape[1]);
        let hd = config.hidden;
        let mut init = Vec::new();
        let mut cells = Vec::new();
        for l in 0..config.layers {
            init.push(LayerInit {
                h: Linear::bind(store, &format!("detok.init{l}.h"), d, hd)?,
                c: Linear::bind(store, &format!("detok.init{l}.c"), d, hd)?,
            });
            let input = if l == 0 { char_dim } else { hd };
            cells.push(LstmCell::bind(store, &format!("detok.lstm{l}"), input, hd)?);
        }
        let head = [
            Linear::bind(store, "detok.head0", hd, hd)?,
            Linear::bind(store, "detok.head1", hd, sigma)?,
        ];
        Ok(Self {
            config,
            d,
            sigma,
            chars,
            char_dim,
            init,
            cells,
            head,
        })
    }

    /// Parameters owned by the decoder (the shared char table excluded).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, c) in self.init.iter().zip(&self.cells) {
            ids.extend(i.h.ids());
            ids.extend(i.c.ids());
            ids.extend(c.ids());
        }
        for h in &self.head {
            ids.extend(h.ids());
        }
        ids
    }

    pub fn char_dim(&self) -> usize {
        self.char_dim
    }

    /// `h[B, d]` -> per layer `(tanh(P_h h + b), P_c h + b')`.
    pub fn init_state(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<State> {
        let s = tape.shape(h);
        if s.len() != 2 || s[1] != self.d {
            return Err(Error::Shape {
                op: "init_state",
                lhs: s.to_vec(),
                rhs: vec![self.d],
            });
        }
        let mut state = Vec::with_capacity(self.init.len());
        for li in &self.init {
            let hh = li.h.forward(tape, store, h)?;
            let hh = tape.tanh(hh);
            let cc = li.c.forward(tape, store, h)?;
            state.push((hh, cc));
        }
        Ok(state)
    }

    /// Advances every layer by one input row per batch item; returns the
    /// top-layer output.
    fn step(&self, tape: &mut Tape, store: &ParamStore, state: &mut State, x: Var) -> Result<Var> {
        let mut input = x;
        for (cell, st) in self.cells.iter().zip(state.iter_mut()) {
            let (h, c) = cell.step(tape, store, input, st.0, st.1)?;
            *st = (h, c);
            input = h;
        }
        Ok(input)
    }

    fn head_logits(&self, tape: &mut Tape, store: &ParamStore, out: Var) -> Result<Var> {
        let z = self.head[0].forward(tape, store, out)?;
        let z = tape.tanh(z);
        self.head[1].forward(tape, store, z)
    }

    /// Per-word summed character cross-entropy, `[B]`, of generating each
    /// target (plus `/w`) from the matching row of `h[B, d]` with the gold
    /// prefix fed back.
    pub fn teacher_forced_loss<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cv: &CharVocabulary,
        h: Var,
        targets: &[S],
    ) -> Result<Var> {
        let b = targets.len();
        if b == 0 {
            return Err(Error::Empty("generation targets"));
        }
        if tape.shape(h)[0] != b {
            return Err(Error::Shape {
                op: "teacher_forced_loss",
                lhs: tape.shape(h).to_vec(),
                rhs: vec![b],
            });
        }
        let gold: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| {
                let t = t.as_ref();
                let t = t.strip_suffix("/w").unwrap_or(t);
                if t.is_empty() {
                    Err(Error::Empty("generation target"))
                } else {
                    Ok(cv.encode(t, usize::MAX))
                }
            })
            .collect::<Result<_>>()?;
        let steps = gold.iter().map(Vec::len).max().unwrap_or(0);
        let table = tape.param(store, self.chars);
        let mut state = self.init_state(tape, store, h)?;
        let mut outs = Vec::with_capacity(steps);
        let mut labels = Vec::with_capacity(steps * b);
        for t in 0..steps {
            let prev: Vec<usize> = gold
                .iter()
                .map(|g| if t == 0 { BOW } else { g.get(t - 1).copied().unwrap_or(PAD) })
                .collect();
            let x = tape.gather_rows(table, &prev)?;
            outs.push(self.step(tape, store, &mut state, x)?);
            labels.extend(gold.iter().map(|g| g.get(t).copied()));
        }
        let all = tape.concat(&outs, 0)?;
        let logits = self.head_logits(tape, store, all)?;
        let ce = tape.cross_entropy(logits, &labels)?;
        let ce = tape.reshape(ce, &[1, steps * b])?;
        let ce = tape.reshape(ce, &[steps, b])?;
        let ones = tape.constant(Tensor::filled(&[1, steps], 1.0));
        let per_word = tape.matmul(ones, ce)?;
        tape.reshape(per_word, &[b])
    }

    /// Decodes one string per row of `h[B, d]`, stopping at `/w` or
    /// `max_len` characters. Never emits the pad or `<w>` symbols.
    pub fn generate(
        &self,
        store: &ParamStore,
        cv: &CharVocabulary,
        h: &Tensor,
        max_len: usize,
        mode: GenMode,
    ) -> Result<Vec<String>> {
        let b = h.rows();
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let table = tape.param(store, self.chars);
        let mut state = self.init_state(&mut tape, store, hv)?;
        let mut rng = match mode {
            GenMode::Sample(seed) => Some(Rng::seed_from_u64(seed)),
            GenMode::Greedy => None,
        };
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let mut prev = vec![BOW; b];
        for _ in 0..=max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let x = tape.gather_rows(table, &prev)?;
            let o = self.step(&mut tape, store, &mut state, x)?;
            let z = self.head_logits(&mut tape, store, o)?;
            let logits = tape.value(z).clone();
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let row = logits.row(i);
                let next = match rng.as_mut() {
                    None => argmax_allowed(row),
                    Some(r) => sample_allowed(row, r),
                };
                if next == EOW || out[i].len() == max_len {
                    done[i] = true;
                } else {
                    out[i].push(next);
                }
                prev[i] = next;
            }
        }
        Ok(out.iter().map(|ids| cv.decode(ids)).collect())
    }
}

fn allowed(id: usize) -> bool {
    id != PAD && id != BOW
}

fn argmax_allowed(row: &[Real]) -> usize {
    let mut best = EOW;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_allowed(row: &[Real], rng: &mut Rng) -> usize {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let w: Vec<Real> = row
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { crate::math::exp(v - max) } else { 0.0 })
        .collect();
    match WeightedIndex::new(&w) {
        Ok(dist) => dist.sample(rng),
        Err(_) => argmax_allowed(row),
    }
}
