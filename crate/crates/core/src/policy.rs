//! Word-selection policies: which words Tok encodes, which supply
//! embedding-loss targets, and which Detok must generate.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math::Real;
use crate::rng;
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Most common second-and-final pieces of two-piece words.
pub const SUFFIXES: [&str; 17] = [
    "s", "ed", "es", "ing", "ly", "al", "ally", "'m", "'re", "'ve", "y", "ive", "er", "'t", "'ll",
    "an", "ers",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Role {
    Usage,
    Loss,
    Generation,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Usage => "usage",
            Role::Loss => "loss",
            Role::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Policy {
    None,
    AllWords,
    AllMulti,
    AllNoSuff,
    RandomFraction { p: Real, seed: u64 },
    EveryKth { k: usize },
}

/// Hook for selection rules beyond the built-in kinds.
pub trait WordSelector {
    /// Indices into `seq.spans`, ascending.
    fn select(&self, role: Role, seq: &TokenSequence, vocab: &Vocabulary, seq_index: u64) -> Vec<usize>;
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::RandomFraction { p, .. } if !(0.0..=1.0).contains(&p) => {
                Err(Error::InvalidConfig {
                    field: "p",
                    reason: "random_fraction probability must lie in [0, 1]".into(),
                })
            }
            Policy::EveryKth { k: 0 } => Err(Error::InvalidConfig {
                field: "k",
                reason: "every_kth needs k >= 1".into(),
            }),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::AllWords => "all_words",
            Policy::AllMulti => "all_multi",
            Policy::AllNoSuff => "all_no_suff",
            Policy::RandomFraction { .. } => "random_fraction",
            Policy::EveryKth { .. } => "every_kth",
        }
    }
}

impl WordSelector for Policy {
    fn select(&self, role: Role, seq: &TokenSequence, vocab: &Vocabulary, seq_index: u64) -> Vec<usize> {
        let n = seq.word_count();
        match *self {
            Policy::None => Vec::new(),
            Policy::AllWords => (0..n).collect(),
            Policy::AllMulti => (0..n).filter(|&w| seq.spans[w].is_multi()).collect(),
            Policy::AllNoSuff => (0..n)
                .filter(|&w| seq.spans[w].is_multi() && !is_suffixed(seq, vocab, w))
                .collect(),
            Policy::RandomFraction { p, seed } => {
                let mut r = rng::keyed(seed, role.name(), seq_index);
                (0..n).filter(|_| r.gen::<Real>() < p).collect()
            }
            Policy::EveryKth { k } => (1..=n).filter(|i| i % k.max(1) == 0).map(|i| i - 1).collect(),
        }
    }
}

/// `[token suff]`: exactly two pieces, the second one in [`SUFFIXES`].
fn is_suffixed(seq: &TokenSequence, vocab: &Vocabulary, word: usize) -> bool {
    let ids = seq.word_ids(word);
    ids.len() == 2
        && vocab
            .piece(ids[1])
            .is_some_and(|p| SUFFIXES.contains(&p.surface.as_str()))
}

/// Multi-token words chosen for generation but left as subword input.
/// Empty means the two selections are compatible.
pub fn validate_alignment(usage: &[usize], generation: &[usize], seq: &TokenSequence) -> Vec<String> {
    generation
        .iter()
        .filter(|w| !usage.contains(w))
        .filter(|&&w| seq.spans.get(w).is_some_and(|s| s.is_multi()))
        .map(|&w| seq.spans[w].word.clone())
        .collect()
}

pub fn check_alignment(usage: &[usize], generation: &[usize], seq: &TokenSequence) -> Result<()> {
    let bad = validate_alignment(usage, generation, seq);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Alignment(bad))
    }
}
