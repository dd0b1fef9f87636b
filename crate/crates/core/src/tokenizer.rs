//! Byte-pair-encoding vocabularies over characters, with two ways of marking
//! word boundaries.
//!
//! A token is a [`Piece`]: a surface string plus whether it starts a word.
//! Rendering is scheme dependent (`##ive` for a word-internal piece under
//! [`Scheme::ContinuationMark`], `▁sport` for a word-initial piece under
//! [`Scheme::SpacePrefix`]), but identity is always the `(surface, initial)`
//! pair, so strings that happen to contain `#` never become ambiguous.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use hashbrown::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::math::Real;

/// Display character for anything outside the character inventory.
pub const UNK_CHAR: char = '\u{FFFD}';
/// Word-start marker used when rendering [`Scheme::SpacePrefix`] tokens.
pub const SPACE_MARK: char = '\u{2581}';
pub const CONTINUATION_MARK: &str = "##";

pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scheme {
    /// Word-internal tokens carry a `##` prefix (WordPiece style).
    ContinuationMark,
    /// Every word-initial token carries a space marker, sequence-initial included.
    SpacePrefix,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::ContinuationMark => "continuation_mark",
            Scheme::SpacePrefix => "space_prefix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "continuation_mark" => Ok(Scheme::ContinuationMark),
            "space_prefix" => Ok(Scheme::SpacePrefix),
            other => Err(Error::Parse(alloc::format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Piece {
    pub surface: String,
    pub initial: bool,
}

impl Piece {
    pub fn new(surface: impl Into<String>, initial: bool) -> Self {
        Self {
            surface: surface.into(),
            initial,
        }
    }

    pub fn render(&self, scheme: Scheme) -> String {
        match (scheme, self.initial) {
            (Scheme::ContinuationMark, false) => alloc::format!("{CONTINUATION_MARK}{}", self.surface),
            (Scheme::SpacePrefix, true) => alloc::format!("{SPACE_MARK}{}", self.surface),
            _ => self.surface.clone(),
        }
    }

    pub fn char_len(&self) -> usize {
        self.surface.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Special(String),
    Piece(Piece),
}

/// One space-delimited word and the half-open token range it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
    pub word: String,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn is_multi(&self) -> bool {
        self.len() >= 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub spans: Vec<WordSpan>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.spans.len()
    }

    pub fn word_ids(&self, word: usize) -> &[TokenId] {
        let s = &self.spans[word];
        &self.ids[s.start..s.end]
    }

    /// Checks that the spans tile `[0, len)` in order.
    pub fn spans_partition(&self) -> bool {
        let mut next = 0;
        for s in &self.spans {
            if s.start != next || s.end <= s.start {
                return false;
            }
            next = s.end;
        }
        next == self.ids.len()
    }

    /// Keeps the first `n` words.
    pub fn truncate_words(&mut self, n: usize) {
        if n < self.spans.len() {
            self.spans.truncate(n);
            let end = self.spans.last().map_or(0, |s| s.end);
            self.ids.truncate(end);
        }
    }

    /// Splits into consecutive chunks of whole words with at most `max_tokens`
    /// tokens each. A single word longer than the limit is cut to fit.
    pub fn chunks(&self, max_tokens: usize) -> Vec<TokenSequence> {
        let mut out = Vec::new();
        let mut cur = TokenSequence::default();
        for s in &self.spans {
            let ids = &self.ids[s.start..s.end.min(s.start + max_tokens)];
            if !cur.is_empty() && cur.len() + ids.len() > max_tokens {
                out.push(core::mem::take(&mut cur));
            }
            let start = cur.ids.len();
            cur.ids.extend_from_slice(ids);
            cur.spans.push(WordSpan {
                start,
                end: cur.ids.len(),
                word: s.word.clone(),
            });
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }
}

/// Whitespace normalisation: runs collapse to one space, ends are stripped.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for w in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

pub fn is_reserved(c: char) -> bool {
    c == UNK_CHAR || c == SPACE_MARK
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    scheme: Scheme,
    specials: Vec<String>,
    pieces: Vec<Piece>,
    merges: Vec<(TokenId, TokenId)>,
    chars: BTreeSet<char>,
    index: HashMap<Piece, TokenId>,
    merge_rank: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme
            && self.specials == other.specials
            && self.pieces == other.pieces
            && self.merges == other.merges
            && self.chars == other.chars
    }
}

fn default_specials() -> Vec<String> {
    alloc::vec![MASK_TOKEN.to_string(), SEP_TOKEN.to_string()]
}

impl Vocabulary {
    /// Assembles a vocabulary and checks its invariants.
    pub fn from_parts(
        scheme: Scheme,
        specials: Vec<String>,
        pieces: Vec<Piece>,
        merges: Vec<(TokenId, TokenId)>,
        chars: BTreeSet<char>,
    ) -> Result<Self> {
        let offset = specials.len();
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), offset + i).is_some() {
                return Err(Error::Parse(alloc::format!(
                    "duplicate token `{}`",
                    p.render(scheme)
                )));
            }
        }
        if chars.iter().any(|&c| is_reserved(c) || c.is_whitespace()) {
            return Err(Error::Parse("reserved character in inventory".into()));
        }
        for c in chars.iter().copied().chain(core::iter::once(UNK_CHAR)) {
            for initial in [true, false] {
                if !index.contains_key(&Piece::new(c.to_string(), initial)) {
                    return Err(Error::Parse(alloc::format!(
                        "base character {c:?} missing a single-character token"
                    )));
                }
            }
        }
        let total = offset + pieces.len();
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            if l < offset || r < offset || l >= total || r >= total {
                return Err(Error::OutOfRange {
                    what: "merge operand",
                    index: l.max(r),
                    size: total,
                });
            }
            let (pl, pr) = (&pieces[l - offset], &pieces[r - offset]);
            if pr.initial {
                return Err(Error::Parse("merge right operand is word-initial".into()));
            }
            let merged = Piece::new(alloc::format!("{}{}", pl.surface, pr.surface), pl.initial);
            let Some(&id) = index.get(&merged) else {
                return Err(Error::Parse(alloc::format!(
                    "merge result `{}` missing from tokens",
                    merged.render(scheme)
                )));
            };
            merge_rank.entry((l, r)).or_insert((rank, id));
        }
        Ok(Self {
            scheme,
            specials,
            pieces,
            merges,
            chars,
            index,
            merge_rank,
        })
    }

    /// Character-level vocabulary over `chars` with no merges.
    pub fn characters(scheme: Scheme, chars: BTreeSet<char>) -> Result<Self> {
        let pieces = base_pieces(&chars);
        Self::from_parts(scheme, default_specials(), pieces, Vec::new(), chars)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Total number of token ids, specials included.
    pub fn len(&self) -> usize {
        self.specials.len() + self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn char_inventory(&self) -> &BTreeSet<char> {
        &self.chars
    }

    pub fn special_id(&self, name: &str) -> Option<TokenId> {
        self.specials.iter().position(|s| s == name)
    }

    pub fn mask_id(&self) -> Option<TokenId> {
        self.special_id(MASK_TOKEN)
    }

    pub fn sep_id(&self) -> Option<TokenId> {
        self.special_id(SEP_TOKEN)
    }

    pub fn token(&self, id: TokenId) -> Result<Token> {
        if id < self.specials.len() {
            Ok(Token::Special(self.specials[id].clone()))
        } else if let Some(p) = self.pieces.get(id - self.specials.len()) {
            Ok(Token::Piece(p.clone()))
        } else {
            Err(Error::OutOfRange {
                what: "token id",
                index: id,
                size: self.len(),
            })
        }
    }

    pub fn piece(&self, id: TokenId) -> Option<&Piece> {
        id.checked_sub(self.specials.len())
            .and_then(|i| self.pieces.get(i))
    }

    pub fn id_of(&self, piece: &Piece) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    /// Rendered token strings in id order.
    pub fn tokens(&self) -> Vec<String> {
        self.specials
            .iter()
            .cloned()
            .chain(self.pieces.iter().map(|p| p.render(self.scheme)))
            .collect()
    }

    pub fn render(&self, id: TokenId) -> Result<String> {
        Ok(match self.token(id)? {
            Token::Special(s) => s,
            Token::Piece(p) => p.render(self.scheme),
        })
    }

    fn char_piece(&self, c: char, initial: bool) -> TokenId {
        let c = if self.chars.contains(&c) { c } else { UNK_CHAR };
        let mut buf = [0u8; 4];
        let key = Piece::new(c.encode_utf8(&mut buf).to_string(), initial);
        self.index[&key]
    }

    /// Token ids of a single word (no whitespace inside).
    pub fn tokenize_word(&self, word: &str) -> Vec<TokenId> {
        let mut syms: Vec<TokenId> = word
            .chars()
            .enumerate()
            .map(|(i, c)| self.char_piece(c, i == 0))
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&(r, _)| (r, w[0], w[1])))
                .min();
            let Some((_, l, r)) = best else { break };
            let merged = self.merge_rank[&(l, r)].1;
            syms = apply_merge(&syms, l, r, merged);
        }
        syms
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for w in text.split_whitespace() {
            let start = seq.ids.len();
            seq.ids.extend(self.tokenize_word(w));
            seq.spans.push(WordSpan {
                start,
                end: seq.ids.len(),
                word: w.to_string(),
            });
        }
        seq
    }

    /// Rebuilds the space-delimited text from token ids.
    pub fn detokenize_ids(&self, ids: &[TokenId]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            match self.token(id)? {
                Token::Special(s) => words.push(s),
                Token::Piece(p) => {
                    if p.initial || words.is_empty() {
                        words.push(p.surface);
                    } else {
                        words.last_mut().unwrap().push_str(&p.surface);
                    }
                }
            }
        }
        Ok(words.join(" "))
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        self.detokenize_ids(&seq.ids)
    }

    /// The same vocabulary keeping only its first `n` merges (and the tokens
    /// they need).
    pub fn with_merge_prefix(&self, n: usize) -> Result<Self> {
        let n = n.min(self.merges.len());
        let offset = self.specials.len();
        let mut keep: Vec<Piece> = base_pieces(&self.chars);
        let mut remap: HashMap<TokenId, TokenId> = HashMap::new();
        for (i, p) in keep.iter().enumerate() {
            remap.insert(self.index[p], offset + i);
        }
        let mut merges = Vec::with_capacity(n);
        for &(l, r) in &self.merges[..n] {
            let merged = self.merge_rank[&(l, r)].1;
            if !remap.contains_key(&merged) {
                remap.insert(merged, offset + keep.len());
                keep.push(self.pieces[merged - offset].clone());
            }
            merges.push((remap[&l], remap[&r]));
        }
        Self::from_parts(self.scheme, self.specials.clone(), keep, merges, self.chars.clone())
    }
}

fn apply_merge(syms: &[TokenId], l: TokenId, r: TokenId, merged: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(merged);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

fn base_pieces(chars: &BTreeSet<char>) -> Vec<Piece> {
    let mut out = Vec::with_capacity(2 * (chars.len() + 1));
    for c in core::iter::once(UNK_CHAR).chain(chars.iter().copied()) {
        out.push(Piece::new(c.to_string(), true));
        out.push(Piece::new(c.to_string(), false));
    }
    out
}

/// Number of non-special tokens a character-level vocabulary over `chars` has.
pub fn base_size(chars: &BTreeSet<char>) -> usize {
    2 * (chars.len() + 1)
}

/// Learns merges greedily by pair frequency until the vocabulary holds
/// `target_size` non-special tokens or no pair occurs twice.
///
/// Ties between equally frequent pairs go to the lexicographically smallest
/// `(left, right)` rendered pair, so the result depends only on the corpus.
pub fn train_bpe<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    target_size: usize,
    scheme: Scheme,
) -> Result<Vocabulary> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let chars: BTreeSet<char> = counts
        .keys()
        .flat_map(|w| w.chars())
        .filter(|&c| !is_reserved(c))
        .collect();
    let base = Vocabulary::characters(scheme, chars.clone())?;
    let offset = base.specials.len();
    let mut pieces = base.pieces.clone();
    let mut index = base.index.clone();
    let mut rendered: Vec<String> = pieces.iter().map(|p| p.render(scheme)).collect();
    let unk = [
        base.char_piece(UNK_CHAR, true),
        base.char_piece(UNK_CHAR, false),
    ];

    let mut words: Vec<(Vec<TokenId>, i64)> = counts
        .iter()
        .map(|(w, &c)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, ch)| base.char_piece(ch, i == 0))
                .collect();
            (syms, c as i64)
        })
        .collect();

    let mut pair_counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut pair_words: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    let mergeable = |p: &(TokenId, TokenId)| !unk.contains(&p.0) && !unk.contains(&p.1);
    for (wi, (syms, c)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            let p = (w[0], w[1]);
            if mergeable(&p) {
                *pair_counts.entry(p).or_default() += c;
                pair_words.entry(p).or_default().insert(wi);
            }
        }
    }

    let mut merges = Vec::new();
    while pieces.len() < target_size {
        let mut best: Option<((TokenId, TokenId), i64)> = None;
        for (&p, &c) in &pair_counts {
            if c < 2 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    c > bc
                        || (c == bc
                            && (&rendered[p.0 - offset], &rendered[p.1 - offset])
                                < (&rendered[bp.0 - offset], &rendered[bp.1 - offset]))
                }
            };
            if better {
                best = Some((p, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (pl, pr) = (&pieces[l - offset], &pieces[r - offset]);
        let merged_piece = Piece::new(alloc::format!("{}{}", pl.surface, pr.surface), pl.initial);
        let merged = match index.get(&merged_piece) {
            Some(&id) => id,
            None => {
                let id = offset + pieces.len();
                rendered.push(merged_piece.render(scheme));
                index.insert(merged_piece.clone(), id);
                pieces.push(merged_piece);
                id
            }
        };
        merges.push((l, r));

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = pair_words
                .remove(&(l, r))
                .map(|s| s.into_iter().collect())
                .unwrap_or_default();
            v.sort_unstable();
            v
        };
        pair_counts.remove(&(l, r));
        for wi in affected {
            let (syms, c) = &words[wi];
            let c = *c;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                if p == (l, r) || !mergeable(&p) {
                    continue;
                }
                if let Some(pc) = pair_counts.get_mut(&p) {
                    *pc -= c;
                }
            }
            let new_syms = apply_merge(syms, l, r, merged);
            for w in new_syms.windows(2) {
                let p = (w[0], w[1]);
                if mergeable(&p) {
                    *pair_counts.entry(p).or_default() += c;
                    pair_words.entry(p).or_default().insert(wi);
                }
            }
            words[wi].0 = new_syms;
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Vocabulary::from_parts(scheme, default_specials(), pieces, merges, chars)
}

/// Share of multi-character tokens not common to both vocabularies:
/// `|A xor B| / |A union B|` over word-initial/internal pieces of length >= 2.
pub fn vocab_discrepancy(a: &Vocabulary, b: &Vocabulary) -> Result<Real> {
    if a.scheme != b.scheme {
        return Err(Error::SchemeMismatch(a.scheme.name(), b.scheme.name()));
    }
    let multi = |v: &Vocabulary| -> BTreeSet<Piece> {
        v.pieces
            .iter()
            .filter(|p| p.char_len() >= 2)
            .cloned()
            .collect()
    };
    let (sa, sb) = (multi(a), multi(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return Ok(0.0);
    }
    let sym = sa.symmetric_difference(&sb).count();
    Ok(sym as Real / union as Real)
}

/// Count of multi-character tokens present in exactly one of the vocabularies.
pub fn unshared_count(a: &Vocabulary, b: &Vocabulary) -> usize {
    let multi = |v: &Vocabulary| -> BTreeSet<Piece> {
        v.pieces
            .iter()
            .filter(|p| p.char_len() >= 2)
            .cloned()
            .collect()
    };
    multi(a).symmetric_difference(&multi(b)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn chars(s: &str) -> BTreeSet<char> {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    /// Hand-built vocabulary: {sport, ##ive, ...} via explicit merges.
    fn toy(scheme: Scheme) -> Vocabulary {
        let cs = chars("sportive");
        let mut pieces = base_pieces(&cs);
        let mut merges = Vec::new();
        let off = 2;
        let mut add = |pieces: &mut Vec<Piece>, l: Piece, r: Piece| {
            let li = pieces.iter().position(|p| *p == l).unwrap() + off;
            let ri = pieces.iter().position(|p| *p == r).unwrap() + off;
            let m = Piece::new(alloc::format!("{}{}", l.surface, r.surface), l.initial);
            if !pieces.contains(&m) {
                pieces.push(m);
            }
            merges.push((li, ri));
        };
        add(&mut pieces, Piece::new("s", true), Piece::new("p", false));
        add(&mut pieces, Piece::new("sp", true), Piece::new("o", false));
        add(&mut pieces, Piece::new("spo", true), Piece::new("r", false));
        add(&mut pieces, Piece::new("spor", true), Piece::new("t", false));
        add(&mut pieces, Piece::new("i", false), Piece::new("v", false));
        add(&mut pieces, Piece::new("iv", false), Piece::new("e", false));
        Vocabulary::from_parts(scheme, default_specials(), pieces, merges, cs).unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_bpe(["ab ab ac"], 100, Scheme::SpacePrefix).unwrap();
        let (l, r) = v.merges()[0];
        assert_eq!(v.piece(l).unwrap().surface, "a");
        assert_eq!(v.piece(r).unwrap().surface, "b");
        // (a,b) occurs twice, (a,c) once: only one merge qualifies.
        assert_eq!(v.merges().len(), 1);
    }

    #[test]
    fn no_budget_means_character_vocabulary() {
        let cs = chars("ab ab ac");
        let v = train_bpe(["ab ab ac"], base_size(&cs), Scheme::ContinuationMark).unwrap();
        assert!(v.merges().is_empty());
        assert!(v.pieces().iter().all(|p| p.char_len() == 1));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert_eq!(
            train_bpe(["  ", ""], 10, Scheme::SpacePrefix).unwrap_err(),
            Error::Empty("corpus")
        );
    }

    #[test]
    fn in_vocabulary_word_is_one_token() {
        let v = toy(Scheme::ContinuationMark);
        let seq = v.tokenize("sport");
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.spans[0], WordSpan { start: 0, end: 1, word: "sport".into() });
    }

    #[test]
    fn continuation_scheme_splits_sportive() {
        let v = toy(Scheme::ContinuationMark);
        let seq = v.tokenize("sportive");
        let rendered: Vec<String> = seq.ids.iter().map(|&i| v.render(i).unwrap()).collect();
        assert_eq!(rendered, vec!["sport", "##ive"]);
        assert_eq!(seq.spans.len(), 1);
        let v = toy(Scheme::SpacePrefix);
        let rendered: Vec<String> = v.tokenize("sportive").ids.iter().map(|&i| v.render(i).unwrap()).collect();
        assert_eq!(rendered, vec!["\u{2581}sport", "ive"]);
    }

    #[test]
    fn unknown_characters_become_unk_and_detokenize_to_it() {
        let v = toy(Scheme::ContinuationMark);
        let seq = v.tokenize("z");
        assert_eq!(seq.len(), 1);
        assert_eq!(v.detokenize(&seq).unwrap(), UNK_CHAR.to_string());
    }

    #[test]
    fn detokenize_rejects_bad_ids() {
        let v = toy(Scheme::ContinuationMark);
        assert!(matches!(
            v.detokenize_ids(&[v.len()]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn hash_heavy_words_round_trip() {
        let text = "## #x ##x x## # ###";
        for scheme in [Scheme::ContinuationMark, Scheme::SpacePrefix] {
            let v = train_bpe([text, text], 60, scheme).unwrap();
            assert_eq!(v.detokenize(&v.tokenize(text)).unwrap(), text);
        }
    }

    #[test]
    fn discrepancy_cases() {
        let cs = chars("abcde");
        let mk = |pairs: &[(&str, &str)]| {
            let mut pieces = base_pieces(&cs);
            let mut merges = Vec::new();
            for (l, r) in pairs {
                let li = pieces.iter().position(|p| p.surface == *l && p.initial).unwrap() + 2;
                let ri = pieces.iter().position(|p| p.surface == *r && !p.initial).unwrap() + 2;
                pieces.push(Piece::new(alloc::format!("{l}{r}"), true));
                merges.push((li, ri));
            }
            Vocabulary::from_parts(Scheme::SpacePrefix, default_specials(), pieces, merges, cs.clone())
                .unwrap()
        };
        let a = mk(&[("a", "b"), ("c", "d")]);
        let b = mk(&[("a", "b"), ("c", "e")]);
        assert_eq!(vocab_discrepancy(&a, &a).unwrap(), 0.0);
        assert!((vocab_discrepancy(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(vocab_discrepancy(&a, &b).unwrap(), vocab_discrepancy(&b, &a).unwrap());
        assert_eq!(unshared_count(&a, &b), 2);
        let c = mk(&[("d", "e")]);
        let d = mk(&[("e", "a")]);
        assert_eq!(vocab_discrepancy(&c, &d).unwrap(), 1.0);
        let other = Vocabulary::characters(Scheme::ContinuationMark, cs.clone()).unwrap();
        assert!(matches!(vocab_discrepancy(&a, &other), Err(Error::SchemeMismatch(..))));
    }

    #[test]
    fn merge_prefix_reproduces_smaller_training_run() {
        let corpus = ["the cat sat on the mat", "the dog sat on the log", "cats and dogs"];
        let big = train_bpe(corpus, 60, Scheme::ContinuationMark).unwrap();
        let small = train_bpe(corpus, 45, Scheme::ContinuationMark).unwrap();
        let prefix = big.with_merge_prefix(small.merges().len()).unwrap();
        assert_eq!(prefix, small);
    }

    #[test]
    fn chunks_respect_limit_and_partition() {
        let v = train_bpe(["aaa bbb aaa ccc ddd"], 20, Scheme::ContinuationMark).unwrap();
        let seq = v.tokenize("aaa bbb ccc ddd aaa");
        for c in seq.chunks(3) {
            assert!(c.len() <= 3 && c.spans_partition());
        }
    }
}

/// Vocabulary whose merges build each listed piece left to right, so words
/// written as those pieces tokenize into them.
pub fn vocab_from_segmentations(scheme: Scheme, words: &[&[&str]]) -> Result<Vocabulary> {
    let mut chars = BTreeSet::new();
    for w in words {
        for p in w.iter() {
            chars.extend(p.chars());
        }
    }
    let mut pieces = base_pieces(&chars);
    let offset = default_specials().len();
    let mut merges = Vec::new();
    let id = |pieces: &Vec<Piece>, p: &Piece| pieces.iter().position(|q| q == p).map(|i| i + offset);
    for w in words {
        for (k, p) in w.iter().enumerate() {
            let cs: Vec<char> = p.chars().collect();
            let Some(&first) = cs.first() else {
                return Err(Error::Empty("segmentation piece"));
            };
            let mut acc = first.to_string();
            for &c in &cs[1..] {
                let left = Piece::new(acc.clone(), k == 0);
                let right = Piece::new(c.to_string(), false);
                acc.push(c);
                let merged = Piece::new(acc.clone(), k == 0);
                if id(&pieces, &merged).is_none() {
                    pieces.push(merged);
                }
                let pair = (
                    id(&pieces, &left).expect("prefix added on the previous character"),
                    id(&pieces, &right).expect("every character is a base piece"),
                );
                if !merges.contains(&pair) {
                    merges.push(pair);
                }
            }
        }
    }
    Vocabulary::from_parts(scheme, default_specials(), pieces, merges, chars)
}
