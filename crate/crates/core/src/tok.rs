//! Character-level word encoder: char embeddings, convolutions of width 2, 3
//! and 4, max-pool over positions, ReLU, and a projection to the model
//! dimension. Also owns the character table shared with the decoder.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::Real;
use crate::nn::{self, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::UNK_CHAR;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// End-of-word, written `/w`.
pub const EOW: usize = 2;
/// Beginning-of-word, the decoder's first input.
pub const BOW: usize = 3;
const RESERVED: usize = 4;

pub const WIDTHS: [usize; 3] = [2, 3, 4];
const MIN_LEN: usize = 4;

/// Character alphabet: four reserved symbols followed by the sorted chars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocabulary {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl CharVocabulary {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut chars: Vec<char> = chars.into_iter().filter(|&c| c != UNK_CHAR).collect();
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + RESERVED)).collect();
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    /// Character for an id; reserved ids other than UNK have none.
    pub fn char_of(&self, id: usize) -> Option<char> {
        match id {
            UNK => Some(UNK_CHAR),
            i if i >= RESERVED => self.chars.get(i - RESERVED).copied(),
            _ => None,
        }
    }

    /// Ids of `word` followed by `/w`, truncated to `max_chars` characters.
    pub fn encode(&self, word: &str, max_chars: usize) -> Vec<usize> {
        let n = word.chars().count();
        if n > max_chars {
            log::warn!("word of {n} characters truncated to {max_chars}");
        }
        let mut ids: Vec<usize> = word.chars().take(max_chars).map(|c| self.id(c)).collect();
        ids.push(EOW);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char_of(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TokConfig {
    pub char_dim: usize,
    pub channels: usize,
    pub max_word_len: usize,
}

impl Default for TokConfig {
    fn default() -> Self {
        Self {
            char_dim: 32,
            channels: 64,
            max_word_len: 64,
        }
    }
}

impl TokConfig {
    /// Exact parameter count for an alphabet of `sigma` symbols and model width `d`.
    pub fn param_count(&self, sigma: usize, d: usize) -> usize {
        let conv: usize = WIDTHS
            .iter()
            .map(|w| w * self.char_dim * self.channels + self.channels)
            .sum();
        sigma * self.char_dim + conv + Linear::param_count(WIDTHS.len() * self.channels, d)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Tok {
    pub config: TokConfig,
    pub d: usize,
    pub chars: ParamId,
    pub convs: Vec<Conv>,
    pub proj: Linear,
}

pub const PREFIX: &str = "tok.";
pub const CHAR_TABLE: &str = "tok.chars";

impl Tok {
    pub fn init(
        config: TokConfig,
        sigma: usize,
        d: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.char_dim == 0 || config.max_word_len == 0 {
            return Err(Error::InvalidConfig {
                field: "char_dim",
                reason: "char_dim and max_word_len must be positive".into(),
            });
        }
        let cd = config.char_dim;
        let chars = store.add(CHAR_TABLE, nn::normal(rng, &[sigma, cd], 1.0))?;
        let mut convs = Vec::new();
        for w in WIDTHS {
            let bound = 1.0 / crate::math::sqrt((w * cd) as Real);
            convs.push(Conv {
                width: w,
                weight: store.add(
                    &alloc::format!("tok.conv{w}.weight"),
                    nn::uniform(rng, &[w * cd, config.channels], bound),
                )?,
                bias: store.add(&alloc::format!("tok.conv{w}.bias"), Tensor::zeros(&[config.channels]))?,
            });
        }
        let proj = Linear::init(store, "tok.proj", WIDTHS.len() * config.channels, d, rng)?;
        Ok(Self {
            config,
            d,
            chars,
            convs,
            proj,
        })
    }

    pub fn bind(config: TokConfig, sigma: usize, d: usize, store: &ParamStore) -> Result<Self> {
        let cd = config.char_dim;
        let mut convs = Vec::new();
        for w in WIDTHS {
            convs.push(Conv {
                width: w,
                weight: store.require(&alloc::format!("tok.conv{w}.weight"), &[w * cd, config.channels])?,
                bias: store.require(&alloc::format!("tok.conv{w}.bias"), &[config.channels])?,
            });
        }
        Ok(Self {
            chars: store.require(CHAR_TABLE, &[sigma, cd])?,
            convs,
            proj: Linear::bind(store, "tok.proj", WIDTHS.len() * config.channels, d)?,
            config,
            d,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.chars];
        for c in &self.convs {
            ids.push(c.weight);
            ids.push(c.bias);
        }
        ids.extend(self.proj.ids());
        ids
    }

    /// Char ids for one word: `/w` appended, left-padded to the widest filter.
    pub fn word_ids(&self, cv: &CharVocabulary, word: &str) -> Vec<usize> {
        let ids = cv.encode(word, self.config.max_word_len);
        if ids.len() >= MIN_LEN {
            return ids;
        }
        let mut padded = vec![PAD; MIN_LEN - ids.len()];
        padded.extend(ids);
        padded
    }

    pub fn encode_word(&self, tape: &mut Tape, store: &ParamStore, cv: &CharVocabulary, word: &str) -> Result<Var> {
        self.encode_batch(tape, store, cv, &[word])
    }

    /// `[words.len(), d]`; row `i` depends only on `words[i]`.
    pub fn encode_batch<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cv: &CharVocabulary,
        words: &[S],
    ) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::Empty("word batch"));
        }
        let seqs: Vec<Vec<usize>> = words.iter().map(|w| self.word_ids(cv, w.as_ref())).collect();
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let table = tape.param(store, self.chars);
        let x = tape.gather_rows(table, &flat)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let w = conv.width;
            let mut lengths = Vec::with_capacity(seqs.len());
            let mut starts = Vec::new();
            let mut off = 0;
            for s in &seqs {
                let windows = s.len() + 1 - w;
                starts.extend(off..off + windows);
                lengths.push(windows);
                off += s.len();
            }
            let mut cols = Vec::with_capacity(w);
            for o in 0..w {
                let idx: Vec<usize> = starts.iter().map(|&s| s + o).collect();
                cols.push(tape.gather_rows(x, &idx)?);
            }
            let patches = tape.concat(&cols, 1)?;
            let k = tape.param(store, conv.weight);
            let b = tape.param(store, conv.bias);
            let y = tape.matmul(patches, k)?;
            let y = tape.add_bias(y, b)?;
            pooled.push(tape.segment_max(y, &lengths)?);
        }
        let feats = tape.concat(&pooled, 1)?;
        let feats = tape.relu(feats);
        self.proj.forward(tape, store, feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::rng::substream;

    fn small() -> (Tok, CharVocabulary, ParamStore) {
        let cv = CharVocabulary::new("abcdefghij".chars());
        let mut store = ParamStore::new();
        let cfg = TokConfig {
            char_dim: 4,
            channels: 3,
            max_word_len: 64,
        };
        let tok = Tok::init(cfg, cv.len(), 5, &mut store, &mut substream(9, "tok")).unwrap();
        (tok, cv, store)
    }

    fn row(tape: &mut Tape, tok: &Tok, store: &ParamStore, cv: &CharVocabulary, w: &str) -> Vec<Real> {
        let v = tok.encode_word(tape, store, cv, w).unwrap();
        tape.value(v).data().to_vec()
    }

    #[test]
    fn char_vocabulary_reserved_symbols() {
        let cv = CharVocabulary::new("bab".chars());
        assert_eq!(cv.len(), 6);
        assert_eq!(cv.encode("abz", 64), vec![4, 5, UNK, EOW]);
        assert_eq!(cv.decode(&[BOW, 4, UNK, 5, EOW, PAD]), "a\u{FFFD}b");
        assert_eq!(cv.encode("abab", 2), vec![4, 5, EOW]);
    }

    #[test]
    fn output_dim_for_all_lengths() {
        let (tok, cv, store) = small();
        for w in ["a", "ab", "abcdefghij", &"j".repeat(100)] {
            let mut t = Tape::new();
            let v = tok.encode_word(&mut t, &store, &cv, w).unwrap();
            assert_eq!(t.shape(v), &[1, 5]);
        }
    }

    #[test]
    fn zero_conv_weights_give_projection_bias() {
        let (tok, cv, mut store) = small();
        for c in &tok.convs {
            let s = store.get(c.weight).shape().to_vec();
            *store.get_mut(c.weight) = Tensor::zeros(&s);
        }
        *store.get_mut(tok.proj.bias) = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0, 3.0]);
        let mut t = Tape::new();
        assert_eq!(row(&mut t, &tok, &store, &cv, "abc"), vec![0.5, -1.0, 2.0, 0.0, 3.0]);
    }

    #[test]
    fn character_order_matters() {
        let (tok, cv, store) = small();
        let mut t = Tape::new();
        let a = row(&mut t, &tok, &store, &cv, "abc");
        for p in ["acb", "bac", "bca", "cab", "cba"] {
            assert_ne!(a, row(&mut t, &tok, &store, &cv, p), "{p}");
        }
    }

    #[test]
    fn batch_matches_loop_bit_exactly() {
        let (tok, cv, store) = small();
        let words = ["a", "hij", "abcdefghij", "ba", "jjjjjjjjjjjjjjjjjjjjjj"];
        let mut t = Tape::new();
        let b = tok.encode_batch(&mut t, &store, &cv, &words).unwrap();
        let b = t.value(b).clone();
        for (i, w) in words.iter().enumerate() {
            assert_eq!(b.row(i), row(&mut t, &tok, &store, &cv, w).as_slice(), "{w}");
        }
        let rev: Vec<&str> = words.iter().rev().copied().collect();
        let r = tok.encode_batch(&mut t, &store, &cv, &rev).unwrap();
        let r = t.value(r).clone();
        for i in 0..words.len() {
            assert_eq!(r.row(i), b.row(words.len() - 1 - i));
        }
        let empty: [&str; 0] = [];
        assert!(tok.encode_batch(&mut t, &store, &cv, &empty).is_err());
    }

    #[test]
    fn param_count_closed_form() {
        let (tok, cv, store) = small();
        let total: usize = tok.param_ids().iter().map(|&id| store.get(id).numel()).sum();
        assert_eq!(total, tok.config.param_count(cv.len(), 5));
        // 14*4 + (2+3+4)*4*3 + 3*3 + 9*5 + 5
        assert_eq!(total, 56 + 108 + 9 + 45 + 5);
        let zero = TokConfig {
            char_dim: 4,
            channels: 0,
            max_word_len: 64,
        };
        assert_eq!(zero.param_count(14, 5), 14 * 4 + 5);
        // Large configuration: 200-dim chars, 256 channels, 768 outputs, ~100 symbols.
        let big = TokConfig {
            char_dim: 200,
            channels: 256,
            max_word_len: 64,
        }
        .param_count(100, 768);
        assert!((500_000..5_000_000).contains(&big), "{big}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (tok, cv, mut store) = small();
        let target = Tensor::matrix(2, 5, (0..10).map(|i| i as Real * 0.1 - 0.4).collect()).unwrap();
        let ids = tok.param_ids();
        let r = check_params(
            &mut store,
            &ids,
            |t, s| {
                let v = tok.encode_batch(t, s, &cv, &["ab", "fedcba"])?;
                let y = t.constant(target.clone());
                let d = t.euclidean_distance(v, y)?;
                Ok(t.sum(d))
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
