//! Deterministic synthetic fixtures: Zipfian English-like corpora and small
//! task datasets for every task kind.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use tokdetok_core::downstream::{Example, TaskKind, TaskSpec};
use tokdetok_core::rng::{self, Rng};

use crate::error::Result;
use crate::{io, tasks};

const NOUNS: &[&str] = &[
    "time", "year", "people", "way", "day", "man", "thing", "woman", "life", "child", "world", "school", "state",
    "family", "student", "group", "country", "problem", "hand", "part", "place", "case", "week", "company", "system",
    "program", "question", "work", "government", "number", "night", "point", "home", "water", "room", "mother",
    "area", "money", "story", "fact", "month", "lot", "right", "study", "book", "eye", "job", "word", "business",
    "issue", "side", "kind", "head", "house", "service", "friend", "father", "power", "hour", "game", "line", "end",
    "member", "law", "car", "city", "community", "name", "president", "team", "minute", "idea", "kid", "body",
    "information", "back", "parent", "face", "others", "level", "office", "door", "health", "person", "art", "war",
    "history", "party", "result", "change", "morning", "reason", "research", "girl", "guy", "moment", "air",
    "teacher", "force", "education", "garden", "river", "window", "market", "village", "letter", "station", "bridge",
    "forest", "island", "kitchen", "mountain", "painting", "picture", "planet", "road", "song", "street", "table",
    "tower", "train", "valley", "voice", "winter", "summer", "doctor", "farmer", "writer", "singer", "player",
    "captain", "dog", "cat", "horse", "bird", "fish", "apple", "bread", "coffee", "dinner", "engine", "festival",
    "harbor", "journey", "lantern", "meadow", "orchard", "palace", "quarrel", "ribbon", "shadow", "thunder",
];

const VERBS: &[&str] = &[
    "walk", "talk", "look", "want", "work", "call", "ask", "need", "seem", "help", "play", "move", "live", "believe",
    "happen", "include", "continue", "learn", "change", "watch", "follow", "stop", "create", "open", "start",
    "visit", "wait", "serve", "remember", "consider", "appear", "love", "offer", "expect", "suggest", "raise",
    "pass", "report", "decide", "pull", "return", "explain", "hope", "develop", "carry", "receive", "agree",
    "support", "reach", "remain", "paint", "clean", "cook", "paint", "climb", "jump", "laugh", "listen", "notice",
    "order", "plant", "protect", "travel", "wander", "whisper", "borrow", "collect", "deliver", "discover",
    "explore", "gather", "imagine", "invent", "measure", "question", "repair", "rescue", "wonder", "answer",
];

const ADJECTIVES: &[&str] = &[
    "good", "new", "old", "great", "high", "small", "large", "long", "young", "important", "different", "bad",
    "little", "real", "early", "strong", "able", "clear", "free", "full", "special", "easy", "hard", "simple",
    "quiet", "bright", "dark", "warm", "cold", "quick", "slow", "happy", "sad", "kind", "proud", "brave",
    "careful", "gentle", "honest", "modern", "ancient", "famous", "curious", "serious", "nervous", "generous",
    "polite", "scrupulous", "sportive", "emphatic", "sudden", "final", "general", "public", "natural", "local",
    "social", "certain", "perfect", "pleasant", "strange", "silent", "golden", "wooden", "tiny", "huge",
];

const DETERMINERS: &[&str] = &["the", "the", "the", "a", "a", "this", "that", "every", "some", "no", "my", "our", "their", "his", "her"];
const PREPOSITIONS: &[&str] = &["in", "on", "at", "with", "from", "to", "of", "near", "under", "behind", "beside", "across", "into", "over"];
const PRONOUNS: &[(&str, bool)] = &[("he", true), ("she", true), ("it", true), ("they", false), ("we", false), ("i", false), ("you", false)];
const CONJUNCTIONS: &[&str] = &["and", "but", "because", "while", "so", "although", "when"];
const NAME_ONSETS: &[&str] = &["b", "br", "d", "f", "g", "gr", "k", "l", "m", "n", "p", "r", "s", "st", "t", "tr", "v", "z"];
const NAME_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou"];
const NAME_CODAS: &[&str] = &["", "n", "r", "l", "s", "th", "nd", "m", "x"];
const PLACE_ENDINGS: &[&str] = &["ton", "ville", "burg", "ford", "field", "port", "stead"];

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(s))).expect("non-empty lexicon")
}

fn ends_consonant_y(w: &str) -> bool {
    let b = w.as_bytes();
    b.len() >= 2 && b[b.len() - 1] == b'y' && !b"aeiou".contains(&b[b.len() - 2])
}

pub fn plural(w: &str) -> String {
    if w.ends_with('s') || w.ends_with("sh") || w.ends_with("ch") || w.ends_with('x') {
        format!("{w}es")
    } else if ends_consonant_y(w) {
        format!("{}ies", &w[..w.len() - 1])
    } else {
        format!("{w}s")
    }
}

pub fn third_person(w: &str) -> String {
    plural(w)
}

pub fn past(w: &str) -> String {
    if w.ends_with('e') {
        format!("{w}d")
    } else if ends_consonant_y(w) {
        format!("{}ied", &w[..w.len() - 1])
    } else {
        format!("{w}ed")
    }
}

pub fn gerund(w: &str) -> String {
    if w.ends_with('e') && !w.ends_with("ee") {
        format!("{}ing", &w[..w.len() - 1])
    } else {
        format!("{w}ing")
    }
}

pub fn adverb(w: &str) -> String {
    if ends_consonant_y(w) {
        format!("{}ily", &w[..w.len() - 1])
    } else if w.ends_with("le") {
        format!("{}y", &w[..w.len() - 1])
    } else {
        format!("{w}ly")
    }
}

/// Sentence generator with Zipfian choices inside each word class and
/// per-noun verb preferences, so that context is informative.
pub struct Generator {
    rng: Rng,
    nouns: Vec<&'static str>,
    verbs: Vec<&'static str>,
    adjs: Vec<&'static str>,
    names: Vec<String>,
    places: Vec<String>,
    noun_z: WeightedIndex<f64>,
    verb_z: WeightedIndex<f64>,
    adj_z: WeightedIndex<f64>,
    name_z: WeightedIndex<f64>,
    place_z: WeightedIndex<f64>,
}

fn dedup(words: &[&'static str]) -> Vec<&'static str> {
    let mut seen = BTreeSet::new();
    words.iter().copied().filter(|w| seen.insert(*w)).collect()
}

fn coin(rng: &mut Rng, syllables: usize) -> String {
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(NAME_ONSETS.choose(rng).unwrap());
        s.push_str(NAME_VOWELS.choose(rng).unwrap());
    }
    s.push_str(NAME_CODAS.choose(rng).unwrap());
    s
}

fn coin_unique(rng: &mut Rng, n: usize, mut make: impl FnMut(&mut Rng) -> String) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = make(rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Generator {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, "fixtures.sentences")
    }

    /// Same lexicon as [`Generator::new`], different sentence stream.
    pub fn with_stream(seed: u64, stream: &str) -> Self {
        let mut rng = rng::substream(seed, "fixtures.lexicon");
        let mut nouns = dedup(NOUNS);
        let mut verbs = dedup(VERBS);
        let mut adjs = dedup(ADJECTIVES);
        nouns.shuffle(&mut rng);
        verbs.shuffle(&mut rng);
        adjs.shuffle(&mut rng);
        let names = coin_unique(&mut rng, 400, |r| {
            let n = r.gen_range(1..=2);
            coin(r, n)
        });
        let places = coin_unique(&mut rng, 200, |r| {
            let mut s = coin(r, 1);
            s.push_str(PLACE_ENDINGS.choose(r).unwrap());
            s
        });
        Self {
            noun_z: zipf(nouns.len(), 1.0),
            verb_z: zipf(verbs.len(), 1.0),
            adj_z: zipf(adjs.len(), 1.0),
            name_z: zipf(names.len(), 1.1),
            place_z: zipf(places.len(), 1.1),
            rng: rng::substream(seed, stream),
            nouns,
            verbs,
            adjs,
            names,
            places,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn places(&self) -> &[String] {
        &self.places
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    fn noun(&mut self) -> usize {
        self.noun_z.sample(&mut self.rng)
    }

    /// Index from a small preferred set keyed by `key`, else a Zipfian draw.
    fn collocate(&mut self, key: usize, stride: usize, p: f64, len: usize, zipf: fn(&mut Self) -> usize) -> usize {
        if self.rng.gen_bool(p) {
            (key * stride + self.rng.gen_range(0..2)) % len
        } else {
            zipf(self)
        }
    }

    fn verb_for(&mut self, noun: usize) -> usize {
        let n = self.verbs.len();
        self.collocate(noun, 7, 0.85, n, |g| g.verb_z.sample(&mut g.rng))
    }

    fn adj_for(&mut self, noun: usize) -> &'static str {
        let n = self.adjs.len();
        let i = self.collocate(noun, 3, 0.8, n, |g| g.adj_z.sample(&mut g.rng));
        self.adjs[i]
    }

    fn object_for(&mut self, verb: usize) -> usize {
        let n = self.nouns.len();
        self.collocate(verb, 5, 0.75, n, Self::noun)
    }

    fn preposition_for(&mut self, verb: usize) -> &'static str {
        if self.rng.gen_bool(0.8) {
            PREPOSITIONS[verb % PREPOSITIONS.len()]
        } else {
            PREPOSITIONS.choose(&mut self.rng).unwrap()
        }
    }

    fn noun_phrase(&mut self, out: &mut Vec<String>, noun: Option<usize>) -> usize {
        let n = match noun {
            Some(n) => n,
            None => self.noun(),
        };
        let det = if self.rng.gen_bool(0.6) {
            DETERMINERS[n % DETERMINERS.len()]
        } else {
            DETERMINERS.choose(&mut self.rng).unwrap()
        };
        let pl = det != "a" && det != "every" && det != "this" && det != "that" && self.rng.gen_bool(0.3);
        out.push(det.to_string());
        if self.rng.gen_bool(0.5) {
            out.push(self.adj_for(n).to_string());
        }
        out.push(if pl { plural(self.nouns[n]) } else { self.nouns[n].to_string() });
        n
    }

    pub fn name(&mut self) -> String {
        self.names[self.name_z.sample(&mut self.rng)].clone()
    }

    pub fn place(&mut self) -> String {
        self.places[self.place_z.sample(&mut self.rng)].clone()
    }

    /// One sentence as space-separated words, punctuation split off.
    pub fn sentence(&mut self) -> String {
        let mut w: Vec<String> = Vec::with_capacity(16);
        match self.rng.gen_range(0..6) {
            0 | 1 => {
                let n = self.noun_phrase(&mut w, None);
                let v = self.verb_for(n);
                w.push(past(self.verbs[v]));
                let o = self.object_for(v);
                self.noun_phrase(&mut w, Some(o));
                if self.rng.gen_bool(0.5) {
                    w.push(self.preposition_for(v).to_string());
                    let o2 = self.object_for(o);
                    self.noun_phrase(&mut w, Some(o2));
                }
            }
            2 => {
                let (p, sing) = *PRONOUNS.choose(&mut self.rng).unwrap();
                w.push(p.to_string());
                let vi = self.verb_z.sample(&mut self.rng);
                let v = self.verbs[vi];
                w.push(if sing { third_person(v) } else { v.to_string() });
                let o = self.object_for(vi);
                self.noun_phrase(&mut w, Some(o));
                let a = self.collocate(vi, 11, 0.8, self.adjs.len(), |g| g.adj_z.sample(&mut g.rng));
                w.push(adverb(self.adjs[a]));
            }
            3 => {
                w.push(self.name());
                w.push("was".into());
                let vi = self.verb_z.sample(&mut self.rng);
                w.push(gerund(self.verbs[vi]));
                w.push(self.preposition_for(vi).to_string());
                w.push(self.place());
                w.push(",".into());
                w.push(CONJUNCTIONS.choose(&mut self.rng).unwrap().to_string());
                let (p, _) = *PRONOUNS.choose(&mut self.rng).unwrap();
                w.push(p.to_string());
                w.push("seemed".into());
                w.push(self.adjs[self.adj_z.sample(&mut self.rng)].to_string());
            }
            4 => {
                let n = self.noun_phrase(&mut w, None);
                w.push("is".into());
                w.push(self.adj_for(n).to_string());
                w.push(",".into());
                w.push("of".into());
                let a = self.adj_for(n + 1);
                w.push(a.to_string());
                w.push(format!("{}ness", a.strip_suffix('y').map(|s| format!("{s}i")).unwrap_or(a.to_string())));
            }
            _ => {
                w.push(self.name());
                w.push("and".into());
                w.push(self.name());
                let v = self.verbs[self.verb_z.sample(&mut self.rng)];
                w.push(past(v));
                w.push("to".into());
                w.push(self.place());
            }
        }
        w.push(".".into());
        w.join(" ")
    }

    /// A line of 1-4 sentences.
    pub fn line(&mut self) -> String {
        let n = self.rng.gen_range(1..=4);
        (0..n).map(|_| self.sentence()).collect::<Vec<_>>().join(" ")
    }

    /// Lines totalling at least `bytes` bytes.
    pub fn corpus(&mut self, bytes: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut total = 0;
        while total < bytes {
            let l = self.line();
            total += l.len() + 1;
            out.push(l);
        }
        out
    }

    pub fn frequent_nouns(&self, n: usize) -> &[&'static str] {
        &self.nouns[..n.min(self.nouns.len())]
    }

    pub fn frequent_adjectives(&self, n: usize) -> &[&'static str] {
        &self.adjs[..n.min(self.adjs.len())]
    }

    pub fn frequent_verbs(&self, n: usize) -> &[&'static str] {
        &self.verbs[..n.min(self.verbs.len())]
    }
}

/// Social-media flavoured rewrite: lower fidelity spelling, elongations,
/// hashtags and emoticons.
pub fn socialize(line: &str, rng: &mut Rng) -> String {
    let mut out = Vec::new();
    for w in line.split(' ') {
        if w == "." && rng.gen_bool(0.4) {
            out.push(["!", "!!", "lol", ":)", ":("].choose(rng).unwrap().to_string());
            continue;
        }
        let mut w = w.to_string();
        if w.len() > 3 && rng.gen_bool(0.08) {
            let last = w.chars().last().unwrap();
            let n = rng.gen_range(2..5);
            w.extend(std::iter::repeat(last).take(n));
        } else if w.len() > 4 && rng.gen_bool(0.05) {
            w = format!("#{w}");
        } else if w == "you" && rng.gen_bool(0.5) {
            w = "u".into();
        }
        out.push(w);
    }
    out.join(" ")
}

const EMOJI_LABELS: usize = 20;

/// Twenty-way sequence classification: each label owns a few cue words and
/// one of them appears in the text.
pub fn emoji_task(seed: u64, sizes: [usize; 3]) -> TaskSpec {
    let mut g = Generator::with_stream(seed, "fixtures.emoji.sentences");
    let cues: Vec<Vec<&'static str>> = (0..EMOJI_LABELS)
        .map(|l| {
            let a = g.frequent_adjectives(60);
            vec![a[l], a[l + EMOJI_LABELS], a[(l + 2 * EMOJI_LABELS) % a.len()]]
        })
        .collect();
    let labels: Vec<String> = (0..EMOJI_LABELS).map(|i| format!("e{i:02}")).collect();
    let mut r = rng::substream(seed, "fixtures.emoji");
    let mut make = |n: usize, g: &mut Generator| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let label = r.gen_range(0..EMOJI_LABELS);
                let cue = cues[label].choose(&mut r).unwrap();
                let mut s = g.sentence();
                s.pop();
                let text = socialize(&format!("{s}so {cue} !"), &mut r);
                Example::Sequence { text, label }
            })
            .collect()
    };
    let train = make(sizes[0], &mut g);
    let dev = make(sizes[1], &mut g);
    let test = make(sizes[2], &mut g);
    TaskSpec {
        kind: TaskKind::SequenceClassification,
        labels,
        train,
        dev,
        test,
    }
}

/// BIO tagging of person names and places.
pub fn ner_task(seed: u64, sizes: [usize; 3]) -> TaskSpec {
    let mut g = Generator::with_stream(seed, "fixtures.ner.sentences");
    let labels: Vec<String> = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"].map(String::from).to_vec();
    let mut make = |n: usize| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let mut words = Vec::new();
                let mut tags = Vec::new();
                let mut push = |ws: &[String], b: usize, i: usize| {
                    for (k, w) in ws.iter().enumerate() {
                        words.push(w.clone());
                        tags.push(if k == 0 { b } else { i });
                    }
                };
                let two = g.rng().gen_bool(0.3);
                let person: Vec<String> = if two { vec![g.name(), g.name()] } else { vec![g.name()] };
                push(&person, 1, 2);
                let filler: Vec<String> = ["visited", "the", "old", "market", "in"].map(String::from).to_vec();
                let k = g.rng().gen_range(1..=filler.len());
                push(&filler[filler.len() - k..], 0, 0);
                let place = vec![g.place()];
                push(&place, 3, 4);
                let tail: Vec<String> = g.sentence().split(' ').map(String::from).collect();
                push(&tail, 0, 0);
                Example::Tagging { words, labels: tags }
            })
            .collect()
    };
    let train = make(sizes[0]);
    let dev = make(sizes[1]);
    let test = make(sizes[2]);
    TaskSpec {
        kind: TaskKind::SequenceTagging,
        labels,
        train,
        dev,
        test,
    }
}

/// Length bounds of the word-shape classes; words in between are not used.
pub const SHORT_MAX: usize = 4;
pub const LONG_MIN: usize = 7;

/// Label of a word in the word-shape task: 0 for short, 1 for long, `None`
/// for the lengths between the two classes.
pub fn shape_label(word: &str) -> Option<usize> {
    match word.chars().count() {
        n if n <= SHORT_MAX => Some(0),
        n if n >= LONG_MIN => Some(1),
        _ => None,
    }
}

/// Word classification over frequent nouns and adjectives; train and
/// dev/test use disjoint word types.
pub fn word_shape_task(seed: u64, per_word: usize) -> TaskSpec {
    let mut g = Generator::with_stream(seed, "fixtures.word_shape.sentences");
    let mut words: Vec<&'static str> = g.frequent_nouns(120).to_vec();
    words.extend_from_slice(g.frequent_adjectives(50));
    words.retain(|w| shape_label(w).is_some());
    let mut r = rng::substream(seed, "fixtures.word_shape");
    words.shuffle(&mut r);
    let n = words.len();
    let (train_w, rest) = words.split_at(n * 3 / 5);
    let (dev_w, test_w) = rest.split_at(rest.len() / 2);
    let make = |ws: &[&str], g: &mut Generator| -> Vec<Example> {
        let mut out = Vec::new();
        for &w in ws {
            for _ in 0..per_word {
                let mut s: Vec<String> = g.sentence().split(' ').map(String::from).collect();
                let index = g.rng().gen_range(0..s.len());
                s.insert(index, w.to_string());
                out.push(Example::Word {
                    text: s.join(" "),
                    index,
                    label: shape_label(w).expect("filtered above"),
                });
            }
        }
        out.shuffle(g.rng());
        out
    };
    let train = make(train_w, &mut g);
    let dev = make(dev_w, &mut g);
    let test = make(test_w, &mut g);
    TaskSpec {
        kind: TaskKind::WordClassification,
        labels: vec!["short".into(), "long".into()],
        train,
        dev,
        test,
    }
}

/// Passage ranking: the selected passage mentions the query noun.
pub fn ranking_task(seed: u64, queries: [usize; 3], candidates: usize) -> TaskSpec {
    let mut g = Generator::with_stream(seed, "fixtures.ranking.sentences");
    let nouns: Vec<&'static str> = g.frequent_nouns(80).to_vec();
    let mut qid = 0;
    let mut make = |n: usize, g: &mut Generator| -> Vec<Example> {
        let mut out = Vec::new();
        for _ in 0..n {
            qid += 1;
            let q = *nouns.choose(g.rng()).unwrap();
            let gold = g.rng().gen_range(0..candidates);
            for c in 0..candidates {
                let passage = loop {
                    let s = g.sentence();
                    let has = s.split(' ').any(|w| w == q || w == plural(q));
                    if c == gold {
                        break format!("{s} the {q} .");
                    } else if !has {
                        break s;
                    }
                };
                out.push(Example::Ranking {
                    query_id: format!("q{qid}"),
                    query: q.to_string(),
                    passage,
                    selected: c == gold,
                });
            }
        }
        out
    };
    let train = make(queries[0], &mut g);
    let dev = make(queries[1], &mut g);
    let test = make(queries[2], &mut g);
    TaskSpec {
        kind: TaskKind::Ranking,
        labels: Vec::new(),
        train,
        dev,
        test,
    }
}

pub const BASE_CORPUS: &str = "corpus/base.txt";
pub const SOCIAL_CORPUS: &str = "corpus/social.txt";
pub const TOY_CORPUS: &str = "toy/corpus.txt";

pub const TOY_LINES: &[&str] = &[
    "the cat sat on the mat",
    "the cats sat",
    "a dog saw the cat",
];

#[derive(Debug, Clone, Copy)]
pub struct FixtureSizes {
    pub corpus_bytes: usize,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        Self {
            corpus_bytes: 1 << 20,
        }
    }
}

/// Writes every fixture under `dir`.
pub fn write_all(dir: &Path, seed: u64, sizes: FixtureSizes) -> Result<()> {
    let mut g = Generator::new(seed);
    let base = g.corpus(sizes.corpus_bytes);
    io::write_string(&dir.join(BASE_CORPUS), &(base.join("\n") + "\n"))?;
    let mut r = rng::substream(seed, "fixtures.social");
    let social: Vec<String> = g
        .corpus(sizes.corpus_bytes)
        .iter()
        .map(|l| socialize(l, &mut r))
        .collect();
    io::write_string(&dir.join(SOCIAL_CORPUS), &(social.join("\n") + "\n"))?;
    io::write_string(&dir.join(TOY_CORPUS), &(TOY_LINES.join("\n") + "\n"))?;
    tasks::write_task(&dir.join("tasks/emoji"), &emoji_task(seed, [1000, 200, 200]))?;
    tasks::write_task(&dir.join("tasks/ner"), &ner_task(seed, [600, 150, 150]))?;
    tasks::write_task(&dir.join("tasks/word_shape"), &word_shape_task(seed, 8))?;
    tasks::write_task(&dir.join("tasks/ranking"), &ranking_task(seed, [150, 40, 40], 5))?;
    Ok(())
}
