//! Surface statistics of a corpus under a subword vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::math::Real;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorpusStats {
    /// Non-empty input lines.
    pub instances: usize,
    /// Space-delimited words.
    pub word_tokens: usize,
    pub word_types: usize,
    pub ttr: Real,
    /// Share of word types split into two or more subword tokens.
    pub multitok_type_rate: Real,
    /// Relative growth of the token count over one token per word.
    pub token_mass_increase: Real,
    pub subword_tokens: usize,
}

/// Incremental counter; shards can be merged before ratios are taken.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    instances: usize,
    word_tokens: usize,
    types: BTreeMap<String, usize>,
}

impl StatsAccumulator {
    pub fn add_line(&mut self, line: &str) {
        let mut any = false;
        for w in line.split_whitespace() {
            any = true;
            self.word_tokens += 1;
            *self.types.entry(w.into()).or_default() += 1;
        }
        if any {
            self.instances += 1;
        }
    }

    pub fn merge(&mut self, other: StatsAccumulator) {
        self.instances += other.instances;
        self.word_tokens += other.word_tokens;
        for (w, c) in other.types {
            *self.types.entry(w).or_default() += c;
        }
    }

    pub fn finish(&self, vocab: &Vocabulary) -> Result<CorpusStats> {
        if self.word_tokens == 0 {
            return Err(Error::Empty("corpus"));
        }
        let mut multi = 0usize;
        let mut subword = 0usize;
        for (w, &c) in &self.types {
            let n = vocab.tokenize_word(w).len();
            if n >= 2 {
                multi += 1;
            }
            subword += n * c;
        }
        let types = self.types.len();
        Ok(CorpusStats {
            instances: self.instances,
            word_tokens: self.word_tokens,
            word_types: types,
            ttr: types as Real / self.word_tokens as Real,
            multitok_type_rate: multi as Real / types as Real,
            token_mass_increase: (subword - self.word_tokens) as Real / self.word_tokens as Real,
            subword_tokens: subword,
        })
    }
}

pub fn compute_stats<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    vocab: &Vocabulary,
) -> Result<CorpusStats> {
    let mut acc = StatsAccumulator::default();
    for l in lines {
        acc.add_line(l);
    }
    acc.finish(vocab)
}
