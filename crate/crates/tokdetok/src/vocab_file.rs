//! Plain-text vocabulary files.
//!
//! ```text
//! tokdetok-vocab version=1 scheme=continuation_mark size=42
//! [chars]
//! a
//! ...
//! [tokens]
//! S	[MASK]
//! I	the
//! C	s
//! [merges]
//! 7 12
//! ```
//!
//! Tokens are listed in id order: `S` marks a special token, `I` a
//! word-initial piece and `C` a continuation piece (stored without marker).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use tokdetok_core::tokenizer::{Piece, Scheme, Vocabulary};

use crate::error::{Error, Result};
use crate::io;

pub const VERSION: u32 = 1;
const MAGIC: &str = "tokdetok-vocab";

pub fn render(vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MAGIC} version={VERSION} scheme={} size={}",
        vocab.scheme().name(),
        vocab.len()
    );
    out.push_str("[chars]\n");
    for c in vocab.char_inventory() {
        out.push(*c);
        out.push('\n');
    }
    out.push_str("[tokens]\n");
    for s in vocab.specials() {
        let _ = writeln!(out, "S\t{s}");
    }
    for p in vocab.pieces() {
        let _ = writeln!(out, "{}\t{}", if p.initial { 'I' } else { 'C' }, p.surface);
    }
    out.push_str("[merges]\n");
    for (l, r) in vocab.merges() {
        let _ = writeln!(out, "{l} {r}");
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Header,
    Chars,
    Tokens,
    Merges,
}

/// Parses vocabulary text; `origin` only labels error messages.
pub fn parse(text: &str, origin: &Path) -> Result<Vocabulary> {
    let err = |line: usize, msg: String| Error::format(origin, line, msg);
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty vocabulary file".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(err(1, format!("expected `{MAGIC}` header")));
    }
    let (mut version, mut scheme, mut size) = (None, None, None);
    for f in fields {
        match f.split_once('=') {
            Some(("version", v)) => version = v.parse::<u32>().ok(),
            Some(("scheme", v)) => scheme = Some(Scheme::parse(v).map_err(|e| err(1, e.to_string()))?),
            Some(("size", v)) => size = v.parse::<usize>().ok(),
            _ => return Err(err(1, format!("unknown header field `{f}`"))),
        }
    }
    if version != Some(VERSION) {
        return Err(err(1, format!("unsupported vocabulary version {version:?}")));
    }
    let scheme = scheme.ok_or_else(|| err(1, "missing scheme".into()))?;
    let size = size.ok_or_else(|| err(1, "missing size".into()))?;

    let mut section = Section::Header;
    let mut chars = BTreeSet::new();
    let mut specials = Vec::new();
    let mut pieces = Vec::new();
    let mut merges = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        match line {
            "[chars]" => section = Section::Chars,
            "[tokens]" => section = Section::Tokens,
            "[merges]" => section = Section::Merges,
            _ => match section {
                Section::Header => return Err(err(n, "content before [chars]".into())),
                Section::Chars => {
                    let mut it = line.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => {
                            chars.insert(c);
                        }
                        _ => return Err(err(n, format!("expected one character, got `{line}`"))),
                    }
                }
                Section::Tokens => {
                    let (kind, surface) = line
                        .split_once('\t')
                        .ok_or_else(|| err(n, "expected `kind<TAB>token`".into()))?;
                    match kind {
                        "S" if pieces.is_empty() => specials.push(surface.to_string()),
                        "S" => return Err(err(n, "special token after regular tokens".into())),
                        "I" => pieces.push(Piece::new(surface, true)),
                        "C" => pieces.push(Piece::new(surface, false)),
                        _ => return Err(err(n, format!("unknown token kind `{kind}`"))),
                    }
                }
                Section::Merges => {
                    let mut it = line.split(' ').map(str::parse::<usize>);
                    match (it.next(), it.next(), it.next()) {
                        (Some(Ok(l)), Some(Ok(r)), None) => merges.push((l, r)),
                        _ => return Err(err(n, format!("expected `left right` ids, got `{line}`"))),
                    }
                }
            },
        }
    }
    let vocab = Vocabulary::from_parts(scheme, specials, pieces, merges, chars)
        .map_err(|e| Error::format(origin, 0, e.to_string()))?;
    if vocab.len() != size {
        return Err(err(1, format!("header size {size} but {} tokens listed", vocab.len())));
    }
    Ok(vocab)
}

pub fn write(path: &Path, vocab: &Vocabulary) -> Result<()> {
    io::write_string(path, &render(vocab))
}

pub fn read(path: &Path) -> Result<Vocabulary> {
    parse(&io::read_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokdetok_core::tokenizer::train_bpe;

    #[test]
    fn round_trip_both_schemes() {
        let corpus = ["the cats sat on the mat", "unbelievable things happened", "naïve café"];
        for scheme in [Scheme::ContinuationMark, Scheme::SpacePrefix] {
            let v = train_bpe(corpus, 60, scheme).unwrap();
            let text = render(&v);
            let back = parse(&text, Path::new("mem")).unwrap();
            assert_eq!(back, v);
            assert_eq!(render(&back), text);
        }
    }

    #[test]
    fn rejects_bad_headers_and_sizes() {
        let v = train_bpe(["a b ab ab"], 10, Scheme::ContinuationMark).unwrap();
        let text = render(&v);
        assert!(parse(&text.replacen("version=1", "version=9", 1), Path::new("x")).is_err());
        let wrong = text.replacen(&format!("size={}", v.len()), "size=3", 1);
        assert!(parse(&wrong, Path::new("x")).is_err());
        assert!(parse("nonsense", Path::new("x")).is_err());
    }
}
